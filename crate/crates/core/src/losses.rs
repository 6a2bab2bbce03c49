//! Training objectives on probability maps, selectable by name.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Dice,
    BceDice,
    RecallCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
            LossKind::BceDice => "bce_dice",
            LossKind::RecallCe => "recall_ce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        REGISTRY
            .iter()
            .find(|entry| entry.name == s)
            .map(|entry| entry.kind)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// BCE weight in the BCE/Dice mixture.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_smooth")]
    pub smooth: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before any log.
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_smooth() -> f64 {
    1.0
}
fn default_clamp() -> f64 {
    1e-7
}

impl LossSpec {
    fn of(kind: LossKind) -> Self {
        Self {
            kind,
            lambda: default_lambda(),
            smooth: default_smooth(),
            clamp: default_clamp(),
        }
    }
    pub fn bce() -> Self {
        Self::of(LossKind::Bce)
    }
    pub fn dice() -> Self {
        Self::of(LossKind::Dice)
    }
    pub fn bce_dice(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::of(LossKind::BceDice)
        }
    }
    pub fn recall_ce() -> Self {
        Self::of(LossKind::RecallCe)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.smooth <= 0.0 {
            return Err(Error::Config(format!("dice smoothing {} must be positive", self.smooth)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config(format!("clamp {} outside (0, 0.5)", self.clamp)));
        }
        Ok(())
    }

    /// Row label in report tables, e.g. `BCE-DICE (0.2)`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::Bce => "BCE".into(),
            LossKind::Dice => "DICE".into(),
            LossKind::BceDice => format!("BCE-DICE ({})", self.lambda),
            LossKind::RecallCe => "RecallCE".into(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn SegmentationLoss>> {
        self.validate()?;
        let entry = REGISTRY
            .iter()
            .find(|e| e.kind == self.kind)
            .expect("every loss kind is registered");
        Ok((entry.build)(self))
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::bce_dice(0.2)
    }
}

/// A scalar objective over `pred` probabilities and binary `target`, both `B×1×H×W`.
pub trait SegmentationLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn compute(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor>;
}

pub struct LossEntry {
    pub name: &'static str,
    pub kind: LossKind,
    pub build: fn(&LossSpec) -> Box<dyn SegmentationLoss>,
}

pub const REGISTRY: &[LossEntry] = &[
    LossEntry {
        name: "bce",
        kind: LossKind::Bce,
        build: |s| Box::new(Bce { clamp: s.clamp }),
    },
    LossEntry {
        name: "dice",
        kind: LossKind::Dice,
        build: |s| Box::new(Dice { smooth: s.smooth }),
    },
    LossEntry {
        name: "bce_dice",
        kind: LossKind::BceDice,
        build: |s| {
            Box::new(BceDice {
                lambda: s.lambda,
                bce: Bce { clamp: s.clamp },
                dice: Dice { smooth: s.smooth },
            })
        },
    },
    LossEntry {
        name: "recall_ce",
        kind: LossKind::RecallCe,
        build: |s| {
            Box::new(RecallCe {
                clamp: s.clamp,
                threshold: 0.5,
            })
        },
    },
];

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub struct Bce {
    pub clamp: f64,
}

impl SegmentationLoss for Bce {
    fn name(&self) -> &'static str {
        "bce"
    }
    fn compute(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        bce_loss(pred, target, self.clamp)
    }
}

pub struct Dice {
    pub smooth: f64,
}

impl SegmentationLoss for Dice {
    fn name(&self) -> &'static str {
        "dice"
    }
    fn compute(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        dice_loss(pred, target, self.smooth)
    }
}

pub struct BceDice {
    pub lambda: f64,
    pub bce: Bce,
    pub dice: Dice,
}

impl SegmentationLoss for BceDice {
    fn name(&self) -> &'static str {
        "bce_dice"
    }
    fn compute(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let bce = self.bce.compute(pred, target)?;
        let dice = self.dice.compute(pred, target)?;
        Ok(((bce * self.lambda)? + (dice * (1.0 - self.lambda))?)?)
    }
}

pub struct RecallCe {
    pub clamp: f64,
    pub threshold: f64,
}

impl SegmentationLoss for RecallCe {
    fn name(&self) -> &'static str {
        "recall_ce"
    }
    fn compute(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        recall_ce_loss(pred, target, self.clamp, self.threshold)
    }
}

/// Mean per-pixel binary cross-entropy.
pub fn bce_loss(pred: &Tensor, target: &Tensor, clamp: f64) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let p = pred.clamp(clamp, 1.0 - clamp)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Soft Dice loss `1 - (2 Σ p·y + s) / (Σ p + Σ y + s)` over the whole batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let inter = (pred * target)?.sum_all()?;
    let denom = ((pred.sum_all()? + target.sum_all()?)? + smooth)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

pub fn bce_dice_loss(pred: &Tensor, target: &Tensor, spec: &LossSpec) -> Result<Tensor> {
    spec.validate()?;
    BceDice {
        lambda: spec.lambda,
        bce: Bce { clamp: spec.clamp },
        dice: Dice { smooth: spec.smooth },
    }
    .compute(pred, target)
}

/// Per-class recall of the current batch under hard thresholding; `None` for
/// a class with no pixels. Computed outside the autograd graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallState {
    pub background: Option<f64>,
    pub crack: Option<f64>,
}

impl RecallState {
    pub fn from_batch(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<Self> {
        check_shapes(pred, target)?;
        let p = pred.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let y = target.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (mut pos, mut tp, mut neg, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (p, y) in p.iter().zip(&y) {
            let hit = *p > threshold;
            if *y > 0.5 {
                pos += 1;
                tp += hit as u64;
            } else {
                neg += 1;
                tn += !hit as u64;
            }
        }
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Ok(Self {
            background: ratio(tn, neg),
            crack: ratio(tp, pos),
        })
    }

    /// Loss weight `1 - R` per class; absent classes get 0 (they have no pixels).
    pub fn weights(&self) -> (f64, f64) {
        (
            self.background.map_or(0.0, |r| 1.0 - r),
            self.crack.map_or(0.0, |r| 1.0 - r),
        )
    }
}

/// Recall-weighted cross-entropy: each pixel's `-log p(true class)` is scaled by
/// `1 - recall` of its class in this batch, then averaged over all pixels.
pub fn recall_ce_loss(pred: &Tensor, target: &Tensor, clamp: f64, threshold: f64) -> Result<Tensor> {
    let state = RecallState::from_batch(pred, target, threshold)?;
    let (w_bg, w_crack) = state.weights();
    let p = pred.clamp(clamp, 1.0 - clamp)?;
    let not_y = target.affine(-1.0, 1.0)?;
    let p_true = ((target * &p)? + (&not_y * p.affine(-1.0, 1.0)?)?)?;
    let weights = target.affine(w_crack - w_bg, w_bg)?.detach();
    Ok((weights * p_true.log()?)?.mean_all()?.neg()?)
}

/// Convenience for tests and reports: evaluate a loss to `f64`.
pub fn loss_value(loss: &dyn SegmentationLoss, pred: &Tensor, target: &Tensor) -> Result<f64> {
    scalar(&loss.compute(pred, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn val(x: Result<Tensor>) -> f64 {
        x.unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_reference_values() {
        assert!((val(bce_loss(&t(&[0.5]), &t(&[1.0]), 1e-7)) - 2f64.ln()).abs() < 1e-12);
        let got = val(bce_loss(&t(&[0.9, 0.8, 0.1, 0.3]), &t(&[1.0, 1.0, 0.0, 0.0]), 1e-7));
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.9f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.197635).abs() < 1e-6);
    }

    #[test]
    fn bce_floor_from_clamp() {
        let y = t(&[1.0, 0.0, 1.0]);
        let got = val(bce_loss(&y, &y, 1e-7));
        assert!(got <= -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(got > 0.0);
    }

    #[test]
    fn dice_reference_values() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        assert!(val(dice_loss(&y, &y, 1.0)).abs() < 1e-12);
        let empty = val(dice_loss(&t(&[0.0; 4]), &t(&[1.0, 1.0, 1.0, 0.0]), 1.0));
        assert!((empty - (1.0 - 1.0 / 4.0)).abs() < 1e-12);
        let got = val(dice_loss(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 0.0, 0.0]), 1e-12));
        assert!((got - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_arithmetic() {
        let bce = 0.693147;
        let dice = 0.5;
        assert!((0.2 * bce + 0.8 * dice - 0.538629f64).abs() < 1e-6);
        assert!(LossSpec::bce_dice(1.2).build().is_err());
        assert!(LossSpec::bce_dice(-0.1).validate().is_err());
    }

    #[test]
    fn recall_weights_from_counts() {
        // 4 crack pixels, 3 above threshold; 2 background, both below
        let pred = t(&[0.9, 0.8, 0.7, 0.2, 0.1, 0.3]);
        let y = t(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let st = RecallState::from_batch(&pred, &y, 0.5).unwrap();
        assert_eq!(st.crack, Some(0.75));
        assert_eq!(st.background, Some(1.0));
        let (w_bg, w_crack) = st.weights();
        assert_eq!((w_bg, w_crack), (0.0, 0.25));
        let got = val(recall_ce_loss(&pred, &y, 1e-7, 0.5));
        let want = -0.25 * (0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln() + 0.2f64.ln()) / 6.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn recall_extremes() {
        // perfect crack recall: crack term vanishes
        let pred = t(&[0.9, 0.6, 0.7, 0.2]);
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let st = RecallState::from_batch(&pred, &y, 0.5).unwrap();
        assert_eq!(st.crack, Some(1.0));
        let got = val(recall_ce_loss(&pred, &y, 1e-7, 0.5));
        // background recall 0.5 -> weight 0.5 on the two background pixels
        let want = -0.5 * (0.3f64.ln() + 0.8f64.ln()) / 4.0;
        assert!((got - want).abs() < 1e-12);
        // zero crack recall: crack pixels weighted like plain CE
        let pred = t(&[0.1, 0.2, 0.3, 0.4]);
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let got = val(recall_ce_loss(&pred, &y, 1e-7, 0.5));
        let want = -(0.1f64.ln() + 0.2f64.ln()) / 4.0;
        assert!((got - want).abs() < 1e-12);
        // absent class contributes nothing
        let st = RecallState::from_batch(&t(&[0.2, 0.7]), &t(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(st.crack, None);
        assert_eq!(st.weights().1, 0.0);
    }

    #[test]
    fn registry_names_round_trip() {
        for entry in REGISTRY {
            let kind: LossKind = entry.name.parse().unwrap();
            assert_eq!(kind.name(), entry.name);
            let spec = LossSpec { kind, ..LossSpec::default() };
            assert_eq!(spec.build().unwrap().name(), entry.name);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(bce_loss(&t(&[0.5, 0.5]), &t(&[1.0]), 1e-7).is_err());
        assert!(dice_loss(&t(&[0.5, 0.5]), &t(&[1.0]), 1.0).is_err());
    }
}
