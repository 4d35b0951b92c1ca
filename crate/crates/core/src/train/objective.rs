use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::corpus::RawInstance;
use crate::error::{Error, Result};
use crate::features::{AlignmentModel, ModelVars, ProjectionHead};
use crate::instance::{
    build_semantic_matrix, sia_aug_loss, sia_loss, sila_loss, siva_loss, InstanceLossConfig,
    SemanticMatrix,
};
use crate::sta::{similarity_importance, sta_loss_on_tape, StaConfig, StaInstance};

/// Which of the five losses enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub sia: bool,
    pub sia_aug: bool,
    pub siva: bool,
    pub sila: bool,
    pub sta: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub const NAMES: [&'static str; 5] = ["sia", "sia_aug", "siva", "sila", "sta"];

    pub fn all() -> Self {
        Self {
            sia: true,
            sia_aug: true,
            siva: true,
            sila: true,
            sta: true,
        }
    }

    pub fn none() -> Self {
        Self {
            sia: false,
            sia_aug: false,
            siva: false,
            sila: false,
            sta: false,
        }
    }

    pub fn any(&self) -> bool {
        self.sia || self.sia_aug || self.siva || self.sila || self.sta
    }

    pub fn is_all(&self) -> bool {
        *self == Self::all()
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "sia" => &mut self.sia,
            "sia_aug" => &mut self.sia_aug,
            "siva" => &mut self.siva,
            "sila" => &mut self.sila,
            "sta" => &mut self.sta,
            other => {
                return Err(Error::config(format!(
                    "unknown loss `{other}`, expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = on;
        Ok(())
    }

    /// Compact label such as `sia+sia_aug+sta`.
    pub fn label(&self) -> String {
        let flags = [self.sia, self.sia_aug, self.siva, self.sila, self.sta];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Component losses and their sum. Disabled components are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sia: f64,
    pub sia_aug: f64,
    pub siva: f64,
    pub sila: f64,
    pub sta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.sia, self.sia_aug, self.siva, self.sila, self.sta]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    /// Component-wise mean; `total` is the mean of the totals.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.sia += b.sia;
            acc.sia_aug += b.sia_aug;
            acc.siva += b.siva;
            acc.sila += b.sila;
            acc.sta += b.sta;
            acc.total += b.total;
        }
        LossBreakdown {
            sia: acc.sia / n,
            sia_aug: acc.sia_aug / n,
            siva: acc.siva / n,
            sila: acc.sila / n,
            sta: acc.sta / n,
            total: acc.total / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub instance: InstanceLossConfig,
    pub sta: StaConfig,
    pub toggles: LossToggles,
}

/// Tape nodes of one batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub sia: Option<NodeId>,
    pub sia_aug: Option<NodeId>,
    pub siva: Option<NodeId>,
    pub sila: Option<NodeId>,
    pub sta: Option<NodeId>,
    pub total: NodeId,
    pub semantic: SemanticMatrix,
}

impl BatchObjective {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let v = |id: Option<NodeId>| id.map_or(Ok(0.0), |id| tape.scalar(id));
        Ok(LossBreakdown {
            sia: v(self.sia)?,
            sia_aug: v(self.sia_aug)?,
            siva: v(self.siva)?,
            sila: v(self.sila)?,
            sta: v(self.sta)?,
            total: tape.scalar(self.total)?,
        })
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Result<Matrix> {
    Matrix::from_rows(&rows.collect::<Vec<_>>())
}

fn project(tape: &mut Tape, head: &crate::features::HeadVars, raw: Matrix) -> Result<NodeId> {
    let x = tape.constant(raw);
    ProjectionHead::forward(tape, head, x)
}

/// Records the enabled losses of one batch on `tape`.
///
/// The semantic matrix is built from the projected report globals' current
/// values and enters as a constant.
pub fn batch_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &[&RawInstance],
    cfg: &ObjectiveConfig,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let t = cfg.toggles;
    if !t.any() {
        return Err(Error::config("at least one loss must be enabled"));
    }
    let ic = &cfg.instance;

    let image = project(tape, &vars.image_global, stack(batch.iter().map(|i| &i.image_global))?)?;
    let report = project(tape, &vars.report_global, stack(batch.iter().map(|i| &i.report_global))?)?;
    let semantic = build_semantic_matrix(tape.value(report), ic)?;

    let need_image_aug = t.sia_aug || t.siva;
    let need_report_aug = t.sia_aug || t.sila;
    let image_aug = if need_image_aug {
        Some(project(tape, &vars.image_global, stack(batch.iter().map(|i| &i.image_global_aug))?)?)
    } else {
        None
    };
    let report_aug = if need_report_aug {
        Some(project(tape, &vars.report_global, stack(batch.iter().map(|i| &i.report_global_aug))?)?)
    } else {
        None
    };

    let sia = t.sia.then(|| sia_loss(tape, image, report, &semantic, ic)).transpose()?;
    let sia_aug = match (t.sia_aug, image_aug, report_aug) {
        (true, Some(ia), Some(ra)) => Some(sia_aug_loss(tape, ia, ra, &semantic, ic)?),
        _ => None,
    };
    let siva = match (t.siva, image_aug) {
        (true, Some(ia)) => Some(siva_loss(tape, image, ia, &semantic, ic)?),
        _ => None,
    };
    let sila = match (t.sila, report_aug) {
        (true, Some(ra)) => Some(sila_loss(tape, report, ra, &semantic, ic)?),
        _ => None,
    };
    let sta = if t.sta {
        Some(sta_term(tape, vars, batch, report, &cfg.sta)?)
    } else {
        None
    };

    let parts: Vec<NodeId> = [sia, sia_aug, siva, sila, sta].into_iter().flatten().collect();
    let total = tape.add_all(&parts)?;
    Ok(BatchObjective {
        sia,
        sia_aug,
        siva,
        sila,
        sta,
        total,
        semantic,
    })
}

fn sta_term(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &[&RawInstance],
    report: NodeId,
    cfg: &StaConfig,
) -> Result<NodeId> {
    let patch_blocks: Vec<&Matrix> = batch.iter().map(|i| &i.patches).collect();
    let token_blocks: Vec<&Matrix> = batch.iter().map(|i| &i.tokens).collect();
    let patches = project(tape, &vars.image_local, Matrix::vstack(&patch_blocks)?)?;
    let tokens = project(tape, &vars.report_local, Matrix::vstack(&token_blocks)?)?;

    let mut insts = Vec::with_capacity(batch.len());
    let (mut p0, mut t0) = (0, 0);
    for (b, inst) in batch.iter().enumerate() {
        let (m, l) = (inst.patches.rows(), inst.tokens.rows());
        let p = tape.slice_rows(patches, p0, m)?;
        let w = tape.slice_rows(tokens, t0, l)?;
        let importance = if cfg.similarity_importance {
            let g = tape.value(report).row(b).to_vec();
            similarity_importance(tape.value(w), &g)?
        } else {
            inst.token_importance.clone()
        };
        insts.push(StaInstance {
            tokens: w,
            patches: p,
            importance,
        });
        p0 += m;
        t0 += l;
    }
    sta_loss_on_tape(tape, &insts, cfg)
}

/// Loss breakdown of one batch without tracking gradients.
pub fn evaluate_batch(
    model: &AlignmentModel,
    batch: &[&RawInstance],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.attach(&mut tape, false);
    let obj = batch_objective(&mut tape, &vars, batch, cfg)?;
    obj.breakdown(&tape)
}
