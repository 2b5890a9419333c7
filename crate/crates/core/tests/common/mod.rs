#![allow(dead_code)]

use kdseg::tensor::{Tape, Tensor, Var};
use kdseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values in ±[0.1, 1], away from the ReLU kink.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `v` to a scalar through a fixed random weighting, so gradients
/// entering the op under test are not all equal.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcdef);
    let w = uniform(tape.shape(v), -1.0, 1.0, &mut r);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Six-loop cross-correlation used as an independent conv oracle.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Tensor<f64> {
    let [b, h, w, cin] = input.shape()[..] else { panic!() };
    let [kh, kw, _, cout] = weight.shape()[..] else { panic!() };
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0; b * oh * ow * cout];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((bi * h + iy as usize) * w + ix as usize) * cin + ci]
                                    * k[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out).unwrap()
}

pub type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One gradient-check case: scalar function plus its parameter values.
pub struct GradCase {
    pub name: &'static str,
    pub f: CheckFn,
    pub params: Vec<Tensor<f64>>,
}

/// Every differentiable primitive, instantiated for one seed.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let s = seed;
    let mut cases = Vec::new();
    let b = r.gen_range(1..=2);
    let h = r.gen_range(3..=6);
    let w = r.gen_range(3..=6);
    let c = r.gen_range(1..=3);
    let cout = r.gen_range(1..=3);
    let k = [1, 3][r.gen_range(0..2)];
    let stride = r.gen_range(1..=2);
    let dilation = r.gen_range(1..=2);
    let padding = dilation * (k - 1) / 2;

    cases.push(GradCase {
        name: "conv2d",
        f: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, dilation, padding)?;
            weighted_sum(t, y, s)
        }),
        params: vec![
            uniform(&[b, h, w, c], -1.0, 1.0, &mut r),
            uniform(&[k, k, c, cout], -1.0, 1.0, &mut r),
            uniform(&[cout], -1.0, 1.0, &mut r),
        ],
    });
    cases.push(GradCase {
        name: "relu",
        f: Box::new(move |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, s)
        }),
        params: vec![away_from_zero(&[b, h, w, c], &mut r)],
    });
    cases.push(GradCase {
        name: "add",
        f: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, w], -1.0, 1.0, &mut r), uniform(&[h, w], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "mul",
        f: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, w], -1.0, 1.0, &mut r), uniform(&[h, w], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "scale",
        f: Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, c], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "log",
        f: Box::new(move |t, v| {
            let y = t.log(v[0]);
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, w, c], 0.2, 2.0, &mut r)],
    });
    let temp = [0.5, 1.0, 2.0, 10.0][r.gen_range(0..4)];
    cases.push(GradCase {
        name: "softmax_t",
        f: Box::new(move |t, v| {
            let y = t.softmax_t(v[0], temp)?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b, h, w, c + 1], -3.0, 3.0, &mut r)],
    });
    cases.push(GradCase {
        name: "sum",
        f: Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        params: vec![uniform(&[b, h, w, c], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "channel_sum",
        f: Box::new(move |t, v| {
            let y = t.channel_sum(v[0])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b, h, w, c], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "spatial_sum",
        f: Box::new(move |t, v| {
            let y = t.spatial_sum(v[0])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b, h, w, c], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "matmul",
        f: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, c], -1.0, 1.0, &mut r), uniform(&[c, w], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "transpose",
        f: Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[h, w], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "reshape",
        f: Box::new(move |t, v| {
            let n = t.value(v[0]).len();
            let y = t.reshape(v[0], &[n])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b, h, w], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "frobenius_sq",
        f: Box::new(|t, v| t.frobenius_sq(v[0], v[1])),
        params: vec![uniform(&[b, h, w, c], -1.0, 1.0, &mut r), uniform(&[b, h, w, c], -1.0, 1.0, &mut r)],
    });
    cases.push(GradCase {
        name: "row_l2_normalize",
        f: Box::new(move |t, v| {
            let y = t.row_l2_normalize(v[0])?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b + 1, w], -1.0, 1.0, &mut r)],
    });
    let (oh, ow) = (r.gen_range(2..=9), r.gen_range(2..=9));
    cases.push(GradCase {
        name: "bilinear_resize",
        f: Box::new(move |t, v| {
            let y = t.bilinear_resize(v[0], oh, ow)?;
            weighted_sum(t, y, s)
        }),
        params: vec![uniform(&[b, h, w, c], -1.0, 1.0, &mut r)],
    });
    cases
}

/// conv → relu → conv → bilinear → softmax composite.
pub fn composite_case(seed: u64) -> GradCase {
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(7));
    GradCase {
        name: "composite",
        f: Box::new(move |t, v| {
            let a = t.conv2d(v[0], v[1], v[2], 1, 1, 1)?;
            let a = t.relu(a);
            let b = t.conv2d(a, v[3], v[4], 2, 2, 2)?;
            let up = t.bilinear_resize(b, 6, 6)?;
            let p = t.softmax_t(up, 2.0)?;
            weighted_sum(t, p, seed)
        }),
        params: vec![
            uniform(&[1, 6, 6, 2], -1.0, 1.0, &mut r),
            uniform(&[3, 3, 2, 3], -0.5, 0.5, &mut r),
            uniform(&[3], -0.1, 0.1, &mut r),
            uniform(&[3, 3, 3, 3], -0.5, 0.5, &mut r),
            uniform(&[3], -0.1, 0.1, &mut r),
        ],
    }
}

/// The six losses with random student inputs and constant teacher values.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    use kdseg::distill::*;
    let mut r = rng(seed.wrapping_add(1000));
    let b = r.gen_range(1..=3);
    let h = r.gen_range(1..=4);
    let w = r.gen_range(1..=4);
    let c = r.gen_range(2..=5);
    let f = r.gen_range(1..=4);
    let old = r.gen_range(1..c);
    let temp = [1.0, 2.0, 5.0][r.gen_range(0..3)];
    let labels: Vec<u8> = (0..b * h * w)
        .map(|_| if r.gen_bool(0.2) { IGNORE_INDEX } else { r.gen_range(0..c as u8) })
        .collect();
    let teacher_logits = uniform(&[b, h, w, c], -3.0, 3.0, &mut r);
    let teacher_feat = uniform(&[b, h, w, f], -1.0, 1.0, &mut r);
    let teacher_dil: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&[b, h, w, f], -1.0, 1.0, &mut r)).collect();
    let branches = BranchSet::new(&[1, 2, 3, 4][..r.gen_range(1..=4)]).unwrap();

    let mut cases = Vec::new();
    cases.push(GradCase {
        name: "loss_ce",
        f: Box::new(move |t, v| loss_ce(t, v[0], &labels, c, IGNORE_INDEX)),
        params: vec![uniform(&[b, h, w, c], -3.0, 3.0, &mut r)],
    });
    let tl = teacher_logits.clone();
    cases.push(GradCase {
        name: "loss_cls_t",
        f: Box::new(move |t, v| {
            let teacher = t.constant(tl.clone());
            loss_cls_t(t, v[0], teacher, &ClassMask::leading(old, c), temp)
        }),
        params: vec![uniform(&[b, h, w, c], -3.0, 3.0, &mut r)],
    });
    let tf = teacher_feat.clone();
    cases.push(GradCase {
        name: "loss_enc",
        f: Box::new(move |t, v| {
            let teacher = t.constant(tf.clone());
            loss_enc(t, v[0], teacher)
        }),
        params: vec![uniform(&[b, h, w, f], -1.0, 1.0, &mut r)],
    });
    let td = teacher_dil.clone();
    cases.push(GradCase {
        name: "loss_dec",
        f: Box::new(move |t, v| {
            let teacher = [0, 1, 2, 3].map(|i| t.constant(td[i].clone()));
            loss_dec(t, &[v[0], v[1], v[2], v[3]], &teacher, branches)
        }),
        params: (0..4).map(|_| uniform(&[b, h, w, f], -1.0, 1.0, &mut r)).collect(),
    });
    let tf = teacher_feat.clone();
    cases.push(GradCase {
        name: "loss_spkd",
        f: Box::new(move |t, v| {
            let teacher = t.constant(tf.clone());
            loss_spkd(t, v[0], teacher)
        }),
        params: vec![uniform(&[b, h, w, f], -1.0, 1.0, &mut r)],
    });
    let tf = teacher_feat;
    cases.push(GradCase {
        name: "loss_spkd_avg",
        f: Box::new(move |t, v| {
            let teacher = t.constant(tf.clone());
            loss_spkd_avg(t, v[0], teacher)
        }),
        params: vec![uniform(&[b, h, w, f], -1.0, 1.0, &mut r)],
    });
    cases
}

/// Direct per-pixel evaluation of the un-tempered output distillation loss:
/// −(1/P) Σ_px Σ_{c old} softmax(teacher)[c] · ln softmax(student)[c].
pub fn cls_oracle(student: &[f64], teacher: &[f64], c: usize, old: &[bool]) -> f64 {
    let softmax = |z: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let pixels = student.len() / c;
    let mut total = 0.0;
    for (zs, zt) in student.chunks(c).zip(teacher.chunks(c)) {
        let (q, p) = (softmax(zs), softmax(zt));
        for ch in 0..c {
            if old[ch] {
                total -= p[ch] * q[ch].ln();
            }
        }
    }
    total / pixels as f64
}

/// Random prediction and ground-truth maps; about a tenth of the ground
/// truth is `255`.
pub fn random_maps(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<u8>, Vec<u8>) {
    let pred = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
    let gt = (0..n).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..c) as u8 }).collect();
    (pred, gt)
}

/// Reference metrics from pixel index sets, independent of any confusion
/// matrix. Returns per-class IoU, per-class PA, mPA, mCA and mIoU.
pub struct SetMetrics {
    pub iou: Vec<Option<f64>>,
    pub pa: Vec<Option<f64>>,
    pub m_pa: Option<f64>,
    pub m_ca: Option<f64>,
    pub m_iou: Option<f64>,
}

pub fn set_oracle(pred: &[u8], gt: &[u8], c: usize) -> SetMetrics {
    use std::collections::BTreeSet;
    let scored: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] != 255).collect();
    let mut iou = Vec::new();
    let mut pa = Vec::new();
    let mut hits = 0usize;
    for class in 0..c {
        let g: BTreeSet<usize> = scored.iter().copied().filter(|&i| gt[i] as usize == class).collect();
        let p: BTreeSet<usize> = scored.iter().copied().filter(|&i| pred[i] as usize == class).collect();
        let inter = g.intersection(&p).count();
        let union = g.union(&p).count();
        hits += inter;
        iou.push((union > 0).then(|| inter as f64 / union as f64));
        pa.push((!g.is_empty()).then(|| inter as f64 / g.len() as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    };
    SetMetrics {
        m_pa: (!scored.is_empty()).then(|| hits as f64 / scored.len() as f64),
        m_ca: mean(&pa),
        m_iou: mean(&iou),
        iou,
        pa,
    }
}

/// Checks split disjointness, the `S_k` chain, the eligibility rule and
/// the relabelling protocol; returns the number of samples assigned.
pub fn check_scenario_invariants(
    dataset: &kdseg::data::Dataset,
    schedule: &kdseg::scenario::ClassSchedule,
    mode: kdseg::scenario::ScenarioMode,
) -> usize {
    use kdseg::scenario::*;
    use std::collections::HashSet;
    let index = dataset.index().unwrap();
    let splits = build_splits(&index, schedule, mode).unwrap();
    assert_eq!(splits.len(), schedule.num_steps() + 1);
    let mut used = HashSet::new();
    let mut prev = ClassSet::new();
    for split in &splits {
        let k = split.k;
        let added: ClassSet = schedule.added(k).iter().copied().collect();
        assert!(!prev.intersects(&added), "U_{k} overlaps S_{}", k as i64 - 1);
        let seen = prev.union(&added);
        assert_eq!(seen, schedule.seen_set(k), "S_{k} chain");
        for id in &split.sample_ids {
            assert!(used.insert(id.clone()), "{id} used twice");
            let s = dataset.get(id).unwrap();
            let classes = ClassSet::from_labels(&s.labels);
            assert!(classes.is_subset(&seen), "{id} has classes outside S_{k}");
            if k > 0 {
                assert!(classes.intersects(&added), "{id} lacks a U_{k} class");
                let out = relabel(&s.labels, mode, &prev, &added).unwrap();
                match mode {
                    ScenarioMode::Learning => assert_eq!(out, s.labels),
                    ScenarioMode::Labeling => {
                        for (&before, &after) in s.labels.iter().zip(&out) {
                            let b = before as usize;
                            assert!(after == 255 || after == 0 || added.contains(after as usize));
                            if b != 0 && prev.contains(b) {
                                assert_eq!(after, 0);
                            } else {
                                assert_eq!(after, before);
                            }
                        }
                    }
                }
            }
        }
        prev = seen;
    }
    used.len()
}

/// A VOC-sized synthetic set on which every named scenario has samples
/// for every step.
pub fn scenario_dataset() -> kdseg::data::Dataset {
    use kdseg::data::synth::{generate, SyntheticSpec};
    generate(&SyntheticSpec {
        num_classes: 21,
        images: 500,
        size: 32,
        min_shapes: 1,
        max_shapes: 2,
        seed: 7,
        skew: 0.9,
    })
    .unwrap()
}
