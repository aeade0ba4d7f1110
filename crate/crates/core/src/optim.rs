//! AdamW with decoupled weight decay, the warmup/decay schedule, and the
//! asymmetric parameter grouping used to slow down the text stream during
//! pre-training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Grads, Matrix, ParamId, ParamStore};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::Model;

/// Linear warmup from 0 to `base_lr` over the first `warmup_frac` of the
/// run, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_frac * total_steps as f64).round() as usize;
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// Divisor applied to the text stream's learning rate during pre-training.
/// `inf` freezes the text stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlowRatio(f64);

impl SlowRatio {
    pub const FREEZE: SlowRatio = SlowRatio(f64::INFINITY);

    pub fn new(ratio: f64) -> Result<Self> {
        if ratio.is_nan() || ratio <= 0.0 {
            return Err(Error::Config(format!("slow-down ratio must be positive, got {ratio}")));
        }
        Ok(Self(ratio))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn multiplier(self) -> f64 {
        if self.0.is_infinite() {
            0.0
        } else {
            1.0 / self.0
        }
    }
}

impl Default for SlowRatio {
    fn default() -> Self {
        SlowRatio(1000.0)
    }
}

impl fmt::Display for SlowRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for SlowRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad slow-down ratio `{s}`")))?;
        SlowRatio::new(v)
    }
}

impl Serialize for SlowRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for SlowRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let r = match Raw::deserialize(d)? {
            Raw::Num(v) => SlowRatio::new(v),
            Raw::Str(s) => s.parse(),
        };
        r.map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub params: Vec<ParamId>,
    pub lr_multiplier: f64,
    pub weight_decay: bool,
}

/// Pre-training: the text stream (`text.*`) at `1/slow_ratio`, everything else
/// at full rate. Fine-tuning: one group at full rate.
pub fn make_param_groups(model: &Model, mode: Mode, slow_ratio: SlowRatio) -> Vec<ParamGroup> {
    match mode {
        Mode::Finetune => vec![ParamGroup {
            params: model.store.ids().collect(),
            lr_multiplier: 1.0,
            weight_decay: true,
        }],
        Mode::Pretrain => {
            let (text, rest): (Vec<ParamId>, Vec<ParamId>) = model.store.ids().partition(|&id| model.is_text_stream(id));
            vec![
                ParamGroup {
                    params: text,
                    lr_multiplier: slow_ratio.multiplier(),
                    weight_decay: true,
                },
                ParamGroup {
                    params: rest,
                    lr_multiplier: 1.0,
                    weight_decay: true,
                },
            ]
        }
    }
}

/// Layer-norm scales/shifts and biases are exempt from weight decay.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Option<Matrix>>,
    pub second_moment: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![None; num_params],
            second_moment: vec![None; num_params],
        }
    }

    /// One update at `lr · group multiplier` per group. Parameters without a
    /// gradient are skipped. Any non-finite gradient aborts before anything
    /// is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, groups: &[ParamGroup], lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for group in groups {
            let glr = lr * group.lr_multiplier;
            for &id in &group.params {
                let Some(g) = grads.get(id) else { continue };
                let m = self.first_moment[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
                let v = self.second_moment[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
                ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                });
                if glr == 0.0 {
                    continue;
                }
                let decay = group.weight_decay && c.weight_decay != 0.0 && !decay_exempt(store.name(id));
                let p = store.get_mut(id);
                if decay {
                    let f = 1.0 - glr * c.weight_decay;
                    p.mapv_inplace(|x| x * f);
                }
                ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= glr * mh / (vh.sqrt() + c.eps);
                });
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}
