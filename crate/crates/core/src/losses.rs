//! Adversarial, feature-matching and reconstruction objectives.
//!
//! Every L1 term is mean-normalized by its element count. Graph versions
//! take [`Var`]s so they can be differentiated; the `*_l1` helpers work on
//! plain waveforms.

use std::rc::Rc;

use d2m_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, LogMelOp, MelParams, Waveform};
use crate::codec::VQSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fm: f64,
    pub code: f64,
    pub wav: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fm: 3.0,
            code: 15.0,
            wav: 40.0,
            mel: 15.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.fm, self.code, self.wav, self.mel].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Generator loss terms; disabled terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: f64,
    pub fm: Option<f64>,
    pub code: Option<f64>,
    pub wav: Option<f64>,
    pub mel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
}

/// `adv + w_fm fm + w_code code + w_wav wav + w_mel mel`, evaluated left to
/// right in exactly the order the training graph uses.
pub fn total_g_loss(terms: LossTerms, w: &LossWeights) -> Result<LossReport> {
    let parts = [
        (terms.fm, w.fm, "feature matching"),
        (terms.code, w.code, "commitment"),
        (terms.wav, w.wav, "waveform"),
        (terms.mel, w.mel, "mel"),
    ];
    if !terms.adv.is_finite() {
        return Err(Error::Numeric(format!("adversarial loss is {}", terms.adv)));
    }
    let mut total = terms.adv;
    for (v, weight, name) in parts {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} loss is {v}")));
            }
            total += v * weight;
        }
    }
    Ok(LossReport { terms, total })
}

/// Graph counterpart of [`total_g_loss`].
pub fn weighted_total(g: &mut Graph, adv: Var, terms: [Option<Var>; 4], w: &LossWeights) -> Var {
    let weights = [w.fm, w.code, w.wav, w.mel];
    let mut total = adv;
    for (t, weight) in terms.into_iter().zip(weights) {
        if let Some(t) = t {
            let s = g.scale(t, weight);
            total = g.add(total, s);
        }
    }
    total
}

fn check_scales(real: usize, fake: usize) -> Result<()> {
    if fake == 0 {
        return Err(Error::InvalidInput("no discriminator scores".into()));
    }
    if real != fake {
        return Err(Error::Shape(format!("{real} real vs {fake} fake score sets")));
    }
    Ok(())
}

/// `sum_k mean(relu(1 - D_k(real))) + mean(relu(1 + D_k(fake)))`.
pub fn hinge_d_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    check_scales(real.len(), fake.len())?;
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let nr = g.scale(r, -1.0);
        let a = g.add_scalar(nr, 1.0);
        let a = g.relu(a);
        let a = g.mean(a);
        let b = g.add_scalar(f, 1.0);
        let b = g.relu(b);
        let b = g.mean(b);
        let s = g.add(a, b);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    Ok(total.unwrap())
}

/// `sum_k mean(-D_k(fake))`.
pub fn hinge_g_loss(g: &mut Graph, fake: &[Var]) -> Result<Var> {
    check_scales(fake.len(), fake.len())?;
    let mut total: Option<Var> = None;
    for &f in fake {
        let m = g.mean(f);
        let s = g.scale(m, -1.0);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    Ok(total.unwrap())
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `sum_k sum_i mean|D_k^i(real) - D_k^i(fake)|`.
pub fn feature_matching_loss(g: &mut Graph, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut total: Option<Var> = None;
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() {
            return Err(Error::Shape(format!("{} real vs {} fake feature maps", rs.len(), fs.len())));
        }
        for (&r, &f) in rs.iter().zip(fs) {
            let s = l1(g, r, f)?;
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
    }
    Ok(total.unwrap())
}

/// Mean L1 between generated features and the looked-up ground truth codes.
pub fn commitment_loss(g: &mut Graph, generated: Var, gt_quantized: Var) -> Result<Var> {
    l1(g, gt_quantized, generated)
}

pub fn waveform_loss(g: &mut Graph, gt: Var, decoded: Var) -> Result<Var> {
    l1(g, gt, decoded)
}

/// Mean L1 between log-mel spectrograms of `[B, 1, L]` signals.
pub fn mel_loss(g: &mut Graph, op: &Rc<LogMelOp>, gt: Var, decoded: Var) -> Result<Var> {
    let len = *g.shape(decoded).last().unwrap();
    if len < op.params().n_fft {
        return Err(Error::InvalidInput(format!(
            "clip of {len} samples is shorter than one mel frame ({})",
            op.params().n_fft
        )));
    }
    let a = g.custom(op.clone(), &[gt]);
    let b = g.custom(op.clone(), &[decoded]);
    l1(g, a, b)
}

/// Mean absolute difference between generated features and ground truth
/// codes.
pub fn commitment_l1(generated: &VQSequence, gt_quantized: &VQSequence) -> Result<f64> {
    if generated.features.dim() != gt_quantized.features.dim() || generated.is_empty() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            generated.features.dim(),
            gt_quantized.features.dim()
        )));
    }
    Ok((&gt_quantized.features - &generated.features).mapv(f64::abs).mean().unwrap())
}

/// Ground truth cropped to the decoded length.
fn cropped<'a>(gt: &'a Waveform, decoded: &Waveform) -> Result<&'a [f64]> {
    if gt.len() < decoded.len() {
        return Err(Error::Shape(format!(
            "ground truth of {} samples is shorter than decoded audio of {}",
            gt.len(),
            decoded.len()
        )));
    }
    Ok(&gt.samples()[..decoded.len()])
}

/// Mean absolute sample difference after cropping the ground truth.
pub fn waveform_l1(gt: &Waveform, decoded: &Waveform) -> Result<f64> {
    let g = cropped(gt, decoded)?;
    if g.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    Ok(g.iter().zip(decoded.samples()).map(|(a, b)| (a - b).abs()).sum::<f64>() / g.len() as f64)
}

/// Mean absolute log-mel difference after cropping the ground truth.
pub fn mel_l1(gt: &Waveform, decoded: &Waveform, params: &MelParams) -> Result<f64> {
    let g = Waveform::new(cropped(gt, decoded)?.to_vec(), gt.sample_rate())?;
    let a = mel_spectrogram(&g, params)?;
    let b = mel_spectrogram(decoded, params)?;
    Ok((&a.frames - &b.frames).mapv(f64::abs).mean().unwrap())
}
