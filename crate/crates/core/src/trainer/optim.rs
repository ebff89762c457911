use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{cast, Matrix, Real};

/// Parameter groups, used to select per-group learning-rate multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    U,
    Gain,
    PTrans,
    VDis,
    Heads,
    ObjectiveEmbed,
    ItemEmbed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::U,
        ParamGroup::Gain,
        ParamGroup::PTrans,
        ParamGroup::VDis,
        ParamGroup::Heads,
        ParamGroup::ObjectiveEmbed,
        ParamGroup::ItemEmbed,
    ];
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam; row-sparse tensors are updated lazily (untouched rows keep both
/// their values and their moments).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamGroup, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per batch before updates.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    fn factors(&self) -> (f64, f64) {
        let t = self.step.max(1) as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    #[inline]
    fn update_slice<T: Real>(
        beta1: f64,
        beta2: f64,
        eps: f64,
        lr: f64,
        (c1, c2): (f64, f64),
        params: &mut [T],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
    ) {
        for k in 0..params.len() {
            let g = grads[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let upd = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            params[k] = cast(params[k].to_f64().unwrap() - upd);
        }
    }

    pub fn update_dense<T: Real>(&mut self, group: ParamGroup, lr: f64, params: &mut [T], grads: &[f64]) {
        let (b1, b2, eps, f) = (self.beta1, self.beta2, self.eps, self.factors());
        let mo = self.moments.entry(group).or_insert_with(|| Moments::new(params.len()));
        Self::update_slice(b1, b2, eps, lr, f, params, grads, &mut mo.m, &mut mo.v);
    }

    pub fn update_rows<T: Real>(
        &mut self,
        group: ParamGroup,
        lr: f64,
        params: &mut Matrix<T>,
        rows: &BTreeMap<usize, Vec<f64>>,
    ) {
        let (b1, b2, eps, f) = (self.beta1, self.beta2, self.eps, self.factors());
        let cols = params.cols();
        let len = params.as_slice().len();
        let mo = self.moments.entry(group).or_insert_with(|| Moments::new(len));
        for (&i, g) in rows {
            let r = i * cols..(i + 1) * cols;
            Self::update_slice(
                b1,
                b2,
                eps,
                lr,
                f,
                params.row_mut(i),
                g,
                &mut mo.m[r.clone()],
                &mut mo.v[r],
            );
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
