//! Source-network presets: scaled-down AlexNet- and VGG-style stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv, fc, pool, relu, Init, Network, Unit, UnitRole};

/// How layers are grouped into freeze units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One conv layer per unit.
    Layer,
    /// One conv block per unit.
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Five conv units and three FC units (N = 8).
    ToyAlexnet,
    /// Five conv blocks and three FC units (N = 8).
    ToyVgg,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-alexnet" => Ok(Architecture::ToyAlexnet),
            "toy-vgg" => Ok(Architecture::ToyVgg),
            other => Err(Error::contract(format!(
                "unknown architecture `{other}` (expected `toy-alexnet` or `toy-vgg`)"
            ))),
        }
    }
}

impl Architecture {
    pub fn granularity(self) -> Granularity {
        match self {
            Architecture::ToyAlexnet => Granularity::Layer,
            Architecture::ToyVgg => Granularity::Block,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::ToyAlexnet => "toy-alexnet",
            Architecture::ToyVgg => "toy-vgg",
        }
    }

    /// Builds a randomly initialized network over `[C,H,W]` inputs ending in
    /// a `classes`-way classification unit `L8` (no trailing ReLU).
    pub fn build(self, input: [usize; 3], classes: usize, rng: &mut impl Rng) -> Result<Network> {
        let [c, h, w] = input;
        let units = match self {
            Architecture::ToyAlexnet => {
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::contract(format!(
                        "toy-alexnet needs H and W divisible by 8, got {h}x{w}"
                    )));
                }
                let ch = [16, 32, 32, 32, 32];
                let mut units = Vec::new();
                let mut cin = c;
                for (i, &cout) in ch.iter().enumerate() {
                    let n = i + 1;
                    let mut specs = vec![
                        conv(&format!("L{n}.conv"), cin, cout),
                        relu(&format!("L{n}.relu")),
                    ];
                    if matches!(n, 1 | 2 | 5) {
                        specs.push(pool(&format!("L{n}.pool")));
                    }
                    units.push(Unit::new(
                        format!("L{n}"),
                        UnitRole::Transferred,
                        specs,
                        rng,
                    ));
                    cin = cout;
                }
                let flat = cin * (h / 8) * (w / 8);
                units.extend(fc_head(flat, 64, classes, rng));
                units
            }
            Architecture::ToyVgg => {
                if h % 16 != 0 || w % 16 != 0 {
                    return Err(Error::contract(format!(
                        "toy-vgg needs H and W divisible by 16, got {h}x{w}"
                    )));
                }
                let ch = [16, 24, 32, 32, 32];
                let mut units = Vec::new();
                let mut cin = c;
                for (i, &cout) in ch.iter().enumerate() {
                    let n = i + 1;
                    let mut specs = vec![
                        conv(&format!("L{n}.conv1"), cin, cout),
                        relu(&format!("L{n}.relu1")),
                        conv(&format!("L{n}.conv2"), cout, cout),
                        relu(&format!("L{n}.relu2")),
                    ];
                    if n != 4 {
                        specs.push(pool(&format!("L{n}.pool")));
                    }
                    units.push(Unit::new(
                        format!("L{n}"),
                        UnitRole::Transferred,
                        specs,
                        rng,
                    ));
                    cin = cout;
                }
                let flat = cin * (h / 16) * (w / 16);
                units.extend(fc_head(flat, 64, classes, rng));
                units
            }
        };
        Network::new(vec![c, h, w], units)
    }
}

fn fc_head(flat: usize, width: usize, classes: usize, rng: &mut impl Rng) -> Vec<Unit> {
    vec![
        Unit::new(
            "L6",
            UnitRole::Transferred,
            vec![fc("L6.fc", flat, width, Init::HeUniform), relu("L6.relu")],
            rng,
        ),
        Unit::new(
            "L7",
            UnitRole::Transferred,
            vec![fc("L7.fc", width, width, Init::HeUniform), relu("L7.relu")],
            rng,
        ),
        Unit::new(
            "L8",
            UnitRole::Transferred,
            vec![fc("L8.fc", width, classes, Init::GlorotUniform)],
            rng,
        ),
    ]
}
