//! Segmentation cross-entropy and the distillation objectives.
//!
//! Every loss takes the teacher side as tape handles but detaches them first,
//! so gradients only ever reach the student.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{softmax_t, Scalar, Tape, Tensor, Var};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DistillVariant {
    /// Plain fine-tuning.
    #[default]
    None,
    /// Temperature-scaled cross-entropy on the outputs of old classes.
    ClsT,
    /// Squared Frobenius distance between encoder features.
    Enc,
    /// Squared Frobenius distance between dilation branch outputs.
    Dec,
    /// Similarity preserving loss on flattened features.
    Spkd,
    /// Similarity preserving loss on spatially summed features.
    SpkdAvg,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 6] = [
        DistillVariant::None,
        DistillVariant::ClsT,
        DistillVariant::Enc,
        DistillVariant::Dec,
        DistillVariant::Spkd,
        DistillVariant::SpkdAvg,
    ];
}

impl FromStr for DistillVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DistillVariant::None,
            "cls-t" => DistillVariant::ClsT,
            "enc" => DistillVariant::Enc,
            "dec" => DistillVariant::Dec,
            "spkd" => DistillVariant::Spkd,
            "spkd-avg" => DistillVariant::SpkdAvg,
            other => {
                return Err(Error::Param(format!(
                    "unknown distillation variant {other:?} (expected none, cls-t, enc, dec, spkd, spkd-avg)"
                )))
            }
        })
    }
}

impl fmt::Display for DistillVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillVariant::None => "none",
            DistillVariant::ClsT => "cls-t",
            DistillVariant::Enc => "enc",
            DistillVariant::Dec => "dec",
            DistillVariant::Spkd => "spkd",
            DistillVariant::SpkdAvg => "spkd-avg",
        })
    }
}

/// Subset of the four dilation branches, stored as a bitmask over 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchSet(u8);

impl BranchSet {
    pub const ALL: BranchSet = BranchSet(0b1111);

    /// Builds a set from 1-based branch numbers.
    pub fn new(branches: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &b in branches {
            if !(1..=4).contains(&b) {
                return Err(Error::Param(format!("dilation branch {b} outside 1..=4")));
            }
            bits |= 1 << (b - 1);
        }
        Ok(BranchSet(bits))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, branch: usize) -> bool {
        (1..=4).contains(&branch) && self.0 & (1 << (branch - 1)) != 0
    }

    /// Zero-based indices of the selected branches.
    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..4).filter(move |i| self.0 & (1 << i) != 0)
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    /// Additional variants summed into the distillation term. Empty by default.
    pub extra: Vec<DistillVariant>,
    pub lambda_d: f64,
    pub temperature: f64,
    pub dec_branches: BranchSet,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variant: DistillVariant::None,
            extra: Vec::new(),
            lambda_d: 1.0,
            temperature: 2.0,
            dec_branches: BranchSet::ALL,
        }
    }
}

impl DistillConfig {
    pub fn fine_tuning() -> Self {
        DistillConfig { lambda_d: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_d.is_finite() || self.lambda_d < 0.0 {
            return Err(Error::Param(format!("lambda_d must be >= 0, got {}", self.lambda_d)));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Param(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.dec_branches.is_empty() {
            return Err(Error::Param("dec_branches must not be empty".into()));
        }
        Ok(())
    }

    /// Variants contributing to the distillation term, `None` filtered out.
    pub fn active_variants(&self) -> Vec<DistillVariant> {
        let mut out = Vec::new();
        for &v in std::iter::once(&self.variant).chain(&self.extra) {
            if v != DistillVariant::None && !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    /// True when the composite objective reduces to plain cross-entropy.
    pub fn is_fine_tuning(&self) -> bool {
        self.lambda_d == 0.0 || self.active_variants().is_empty()
    }
}

/// Which output channels belong to previously learned classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask(Vec<bool>);

impl ClassMask {
    pub fn new(mask: Vec<bool>) -> Self {
        ClassMask(mask)
    }

    /// The first `old` of `total` channels are old classes.
    pub fn leading(old: usize, total: usize) -> Self {
        ClassMask((0..total).map(|c| c < old).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn old_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_old(&self, c: usize) -> bool {
        self.0[c]
    }
}

fn batch_size(tape: &Tape<impl Scalar>, v: Var, op: &'static str) -> Result<usize> {
    match tape.shape(v).first() {
        Some(&b) if b > 0 && tape.shape(v).len() >= 2 => Ok(b),
        _ => Err(Error::shape(op, format!("expected a batched tensor, got {:?}", tape.shape(v)))),
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Mean over labelled pixels of −log softmax(logits)[label]. Pixels equal to
/// `ignore_index` contribute neither value nor gradient.
pub fn loss_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    num_classes: usize,
    ignore_index: u8,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let c = *shape.last().unwrap_or(&0);
    if shape.len() != 4 || c != num_classes {
        return Err(Error::shape("loss_ce", format!("logits {shape:?} do not end in {num_classes} classes")));
    }
    let pixels = shape[..3].iter().product::<usize>();
    if labels.len() != pixels {
        return Err(Error::shape("loss_ce", format!("{} labels for {pixels} pixels", labels.len())));
    }
    let mut valid = 0usize;
    for &l in labels {
        if l == ignore_index {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        valid += 1;
    }
    let mut weights = Tensor::<T>::zeros(&shape);
    if valid > 0 {
        let w = T::one() / T::lit(valid as f64);
        for (px, &l) in labels.iter().enumerate() {
            if l != ignore_index {
                weights.data_mut()[px * c + l as usize] = w;
            }
        }
    }
    let probs = tape.softmax_t(logits, 1.0)?;
    let logp = tape.log(probs);
    let weights = tape.constant(weights);
    let weighted = tape.mul(logp, weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -T::one()))
}

/// Cross-entropy between temperature-softened teacher and student outputs,
/// summed over old classes only and averaged over pixels. Both softmaxes
/// normalise over all channels.
pub fn loss_cls_t<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: Var,
    mask: &ClassMask,
    temperature: f64,
) -> Result<Var> {
    same_shape(tape, "loss_cls_t", student_logits, teacher_logits)?;
    let shape = tape.shape(student_logits).to_vec();
    let c = *shape.last().ok_or_else(|| Error::shape("loss_cls_t", "scalar logits"))?;
    if mask.len() != c {
        return Err(Error::shape("loss_cls_t", format!("mask of {} for {c} channels", mask.len())));
    }
    let pixels = shape[..shape.len() - 1].iter().product::<usize>();
    let mut target = softmax_t(tape.value(teacher_logits), temperature)?;
    let inv = T::one() / T::lit(pixels.max(1) as f64);
    for px in target.data_mut().chunks_exact_mut(c) {
        for (ch, p) in px.iter_mut().enumerate() {
            *p = if mask.is_old(ch) { *p * inv } else { T::zero() };
        }
    }
    let q = tape.softmax_t(student_logits, temperature)?;
    let logq = tape.log(q);
    let target = tape.constant(target);
    let weighted = tape.mul(logq, target)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -T::one()))
}

/// Logit given to channels the teacher does not have. Low enough that their
/// softmax probability is exactly zero at any temperature we accept.
pub const ABSENT_LOGIT: f32 = -1.0e30;

/// Pads teacher logits `[…, C_old]` to `[…, total]` so the teacher's
/// distribution over its own classes is unchanged and new channels get
/// probability zero.
pub fn widen_logits(logits: &Tensor<f32>, total: usize) -> Result<Tensor<f32>> {
    let shape = logits.shape();
    let c = *shape.last().ok_or_else(|| Error::shape("widen_logits", "scalar logits"))?;
    if total < c {
        return Err(Error::shape("widen_logits", format!("cannot narrow {c} channels to {total}")));
    }
    let mut data = Vec::with_capacity(logits.len() / c.max(1) * total);
    for px in logits.data().chunks_exact(c) {
        data.extend_from_slice(px);
        data.extend(std::iter::repeat_n(ABSENT_LOGIT, total - c));
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = total;
    Tensor::new(out_shape, data)
}

/// `(1/B) Σ_b ‖teacher_b − student_b‖²_F` on encoder features.
pub fn loss_enc<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    same_shape(tape, "loss_enc", student, teacher)?;
    let b = batch_size(tape, student, "loss_enc")?;
    let teacher = tape.detach(teacher);
    let sq = tape.frobenius_sq(student, teacher)?;
    Ok(tape.scale(sq, T::one() / T::lit(b as f64)))
}

/// Mean over the selected branches of the per-image squared Frobenius
/// distance between dilation branch outputs.
pub fn loss_dec<T: Scalar>(
    tape: &mut Tape<T>,
    student: &[Var; 4],
    teacher: &[Var; 4],
    branches: BranchSet,
) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::Param("loss_dec needs at least one branch".into()));
    }
    let b = batch_size(tape, student[0], "loss_dec")?;
    let mut total: Option<Var> = None;
    for i in branches.indices() {
        same_shape(tape, "loss_dec", student[i], teacher[i])?;
        let t = tape.detach(teacher[i]);
        let sq = tape.frobenius_sq(student[i], t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let total = total.expect("non-empty branch set");
    Ok(tape.scale(total, T::one() / T::lit((b * branches.len()) as f64)))
}

/// Row-normalised batch self-similarity of a `B × N` matrix.
fn similarity<T: Scalar>(tape: &mut Tape<T>, flat: Var) -> Result<Var> {
    let t = tape.transpose(flat)?;
    let gram = tape.matmul(flat, t)?;
    tape.row_l2_normalize(gram)
}

fn spkd_on_rows<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var, b: usize) -> Result<Var> {
    let a_s = similarity(tape, student)?;
    let a_t = similarity(tape, teacher)?;
    let sq = tape.frobenius_sq(a_s, a_t)?;
    Ok(tape.scale(sq, T::one() / T::lit(b as f64)))
}

/// Similarity preserving distillation on features flattened to `B × hwF`.
pub fn loss_spkd<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    same_shape(tape, "loss_spkd", student, teacher)?;
    let b = batch_size(tape, student, "loss_spkd")?;
    let n = tape.value(student).len() / b;
    let teacher = tape.detach(teacher);
    let s = tape.reshape(student, &[b, n])?;
    let t = tape.reshape(teacher, &[b, n])?;
    spkd_on_rows(tape, s, t, b)
}

/// Similarity preserving distillation on features summed over all spatial
/// positions, `B × F`.
pub fn loss_spkd_avg<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    same_shape(tape, "loss_spkd_avg", student, teacher)?;
    let b = batch_size(tape, student, "loss_spkd_avg")?;
    let teacher = tape.detach(teacher);
    let s = tape.spatial_sum(student)?;
    let t = tape.spatial_sum(teacher)?;
    spkd_on_rows(tape, s, t, b)
}

/// `ce + λ·distill`. With `λ = 0` or no distillation term the cross-entropy
/// handle is returned unchanged.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ce: Var,
    distill: Option<Var>,
    lambda_d: f64,
) -> Result<Var> {
    match distill {
        Some(d) if lambda_d != 0.0 => {
            let scaled = tape.scale(d, T::lit(lambda_d));
            tape.add(ce, scaled)
        }
        _ => Ok(ce),
    }
}

/// Student and teacher taps required by the distillation losses.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub features: Var,
    pub dilations: [Var; 4],
    pub logits: Var,
}

/// Sum of the configured distillation terms, or `None` for fine-tuning.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DistillConfig,
    student: &Taps,
    teacher: &Taps,
    mask: &ClassMask,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for variant in cfg.active_variants() {
        let term = match variant {
            DistillVariant::None => continue,
            DistillVariant::ClsT => loss_cls_t(tape, student.logits, teacher.logits, mask, cfg.temperature)?,
            DistillVariant::Enc => loss_enc(tape, student.features, teacher.features)?,
            DistillVariant::Dec => loss_dec(tape, &student.dilations, &teacher.dilations, cfg.dec_branches)?,
            DistillVariant::Spkd => loss_spkd(tape, student.features, teacher.features)?,
            DistillVariant::SpkdAvg => loss_spkd_avg(tape, student.features, teacher.features)?,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}
