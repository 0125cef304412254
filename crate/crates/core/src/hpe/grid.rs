use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::HyperConfig;

/// Which learning rate carries the five-point axis of a 5×3 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrAxis {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GridShape {
    /// Three backbone lrs × three head lrs × three epoch counts.
    #[serde(rename = "3x3x3")]
    Cube,
    /// Five values of one lr × three epoch counts, the other lr fixed.
    #[serde(rename = "5x3")]
    FiveByThree { lr: LrAxis },
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridShape::Cube => f.write_str("3x3x3"),
            GridShape::FiveByThree { lr: LrAxis::Backbone } => f.write_str("5x3-backbone"),
            GridShape::FiveByThree { lr: LrAxis::Head } => f.write_str("5x3-head"),
        }
    }
}

impl FromStr for GridShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3x3x3" => Ok(GridShape::Cube),
            "5x3" | "5x3-head" => Ok(GridShape::FiveByThree { lr: LrAxis::Head }),
            "5x3-backbone" => Ok(GridShape::FiveByThree { lr: LrAxis::Backbone }),
            _ => Err(Error::invalid(format!("unknown grid shape `{s}`"))),
        }
    }
}

/// An ordered, duplicate-free list of configurations plus how it was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigGrid {
    pub configs: Vec<HyperConfig>,
    pub center: HyperConfig,
    pub spacing: f64,
    pub shape: GridShape,
    /// Axes whose points all coincide, e.g. every lr axis when `spacing == 1`.
    pub degenerate_axes: Vec<String>,
}

impl ConfigGrid {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// A grid holding exactly the given configurations in canonical order.
    pub fn from_configs(configs: Vec<HyperConfig>) -> Result<Self> {
        let Some(&center) = configs.first() else {
            return Err(Error::invalid("grid must hold at least one configuration"));
        };
        for c in &configs {
            c.validate()?;
            if c.method != center.method {
                return Err(Error::invalid("all grid configurations must share one method"));
            }
        }
        let configs = canonical(configs);
        Ok(Self { configs, center, spacing: 1.0, shape: GridShape::Cube, degenerate_axes: vec![] })
    }
}

/// Sorts by `(epochs, lr_backbone, lr_head)` and drops exact duplicates.
pub fn canonical(mut configs: Vec<HyperConfig>) -> Vec<HyperConfig> {
    configs.sort_by(|a, b| {
        a.epochs
            .cmp(&b.epochs)
            .then(a.lr_backbone.total_cmp(&b.lr_backbone))
            .then(a.lr_head.total_cmp(&b.lr_head))
    });
    configs.dedup_by(|a, b| a == b);
    configs
}

/// Rounds to 12 significant digits so that e.g. `1e-5 / 5` is the double
/// nearest to `2e-6` rather than one ulp off.
fn snap(v: f64) -> f64 {
    format!("{v:.11e}").parse().unwrap_or(v)
}

pub(crate) fn lr_axis(center: f64, spacing: f64, points: usize) -> Vec<f64> {
    let s2 = spacing * spacing;
    let mut axis: Vec<f64> = match points {
        3 => vec![center / spacing, center, center * spacing],
        _ => vec![center / s2, center / spacing, center, center * spacing, center * s2],
    }
    .into_iter()
    .map(snap)
    .collect();
    axis.dedup();
    axis
}

/// `E_max = epochs + 10`, then one third, two thirds and all of it, each
/// rounded half-up, ascending without repeats.
pub fn epoch_axis(center_epochs: usize) -> Vec<usize> {
    let e = center_epochs + 10;
    let mut axis = vec![(2 * e + 3) / 6, (4 * e + 3) / 6, e];
    axis.dedup();
    axis
}

pub fn build_grid(center: &HyperConfig, shape: GridShape, spacing: f64) -> Result<ConfigGrid> {
    center.validate()?;
    if !(spacing >= 1.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing must be finite and >= 1, got {spacing}")));
    }
    if center.epochs == 0 {
        return Err(Error::invalid("center epochs must be positive"));
    }
    let needs_backbone = matches!(shape, GridShape::Cube | GridShape::FiveByThree { lr: LrAxis::Backbone });
    let needs_head = matches!(shape, GridShape::Cube | GridShape::FiveByThree { lr: LrAxis::Head });
    if needs_backbone && center.lr_backbone <= 0.0 {
        return Err(Error::invalid("center lr_backbone must be positive for this grid shape"));
    }
    if needs_head && center.lr_head <= 0.0 {
        return Err(Error::invalid("center lr_head must be positive for this grid shape"));
    }
    let (backbone, head) = match shape {
        GridShape::Cube => (lr_axis(center.lr_backbone, spacing, 3), lr_axis(center.lr_head, spacing, 3)),
        GridShape::FiveByThree { lr: LrAxis::Backbone } => (lr_axis(center.lr_backbone, spacing, 5), vec![center.lr_head]),
        GridShape::FiveByThree { lr: LrAxis::Head } => (vec![center.lr_backbone], lr_axis(center.lr_head, spacing, 5)),
    };
    let epochs = epoch_axis(center.epochs);
    let mut degenerate_axes = Vec::new();
    if needs_backbone && backbone.len() == 1 {
        degenerate_axes.push("lr_backbone".to_string());
    }
    if needs_head && head.len() == 1 {
        degenerate_axes.push("lr_head".to_string());
    }
    if epochs.len() == 1 {
        degenerate_axes.push("epochs".to_string());
    }
    if !degenerate_axes.is_empty() {
        log::warn!("grid around {center:?} has degenerate axes: {}", degenerate_axes.join(", "));
    }
    let mut configs = Vec::with_capacity(backbone.len() * head.len() * epochs.len());
    for &e in &epochs {
        for &b in &backbone {
            for &h in &head {
                configs.push(HyperConfig { lr_backbone: b, lr_head: h, epochs: e, method: center.method });
            }
        }
    }
    Ok(ConfigGrid { configs: canonical(configs), center: *center, spacing, shape, degenerate_axes })
}
