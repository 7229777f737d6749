//! Sequence encoders mapping an item history to one summary vector.
//!
//! Every backbone returns the learned start token for an empty history.

use serde::{Deserialize, Serialize};

use super::{RecError, Result};
use crate::numerics::{Matrix, Parameter, Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Mean of the history item embeddings.
    PooledMlp,
    /// Gated recurrent unit over the history; final hidden state.
    Recurrent,
    /// One attention layer read out at the last position.
    SelfAttention,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.uniform(-bound, bound)))
}

fn gather<T: Scalar>(table: &Matrix<T>, ids: &[u32]) -> Matrix<T> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    table.select_rows(&idx)
}

fn scatter_add<T: Scalar>(grad: &mut Matrix<T>, ids: &[u32], d: &Matrix<T>) {
    for (r, &id) in ids.iter().enumerate() {
        for (g, &x) in grad.row_mut(id as usize).iter_mut().zip(d.row(r)) {
            *g += x;
        }
    }
}

/// GRU with `h' = (1 − z) ⊙ n + z ⊙ h`, `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    /// `D × 3D` input weights for the update, reset and candidate gates.
    pub wx: Parameter<T>,
    /// `D × 2D` recurrent weights for the update and reset gates.
    pub uzr: Parameter<T>,
    /// `D × D` recurrent weights of the candidate.
    pub un: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone)]
struct GruStep<T> {
    t: usize,
    rows: Vec<usize>,
    x: Matrix<T>,
    h: Matrix<T>,
    z: Matrix<T>,
    r: Matrix<T>,
    n: Matrix<T>,
}

impl<T: Scalar> GruCell<T> {
    fn new(d: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        Self {
            wx: Parameter::new("gru.wx", uniform(d, 3 * d, b, rng)),
            uzr: Parameter::new("gru.uzr", uniform(d, 2 * d, b, rng)),
            un: Parameter::new("gru.un", uniform(d, d, b, rng)),
            bias: Parameter::new("gru.bias", Matrix::zeros(1, 3 * d)),
        }
    }

    fn step(&self, x: &Matrix<T>, h: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>)> {
        let d = h.cols();
        let a = x.matmul(&self.wx.value)?;
        let hu = h.matmul(&self.uzr.value)?;
        let b = self.bias.value.row(0);
        let (rows, _) = h.shape();
        let mut z = Matrix::zeros(rows, d);
        let mut r = Matrix::zeros(rows, d);
        let mut rh = Matrix::zeros(rows, d);
        for i in 0..rows {
            for c in 0..d {
                let zi = sigmoid(a.get(i, c) + hu.get(i, c) + b[c]);
                let ri = sigmoid(a.get(i, d + c) + hu.get(i, d + c) + b[d + c]);
                z.set(i, c, zi);
                r.set(i, c, ri);
                rh.set(i, c, ri * h.get(i, c));
            }
        }
        let nu = rh.matmul(&self.un.value)?;
        let mut n = Matrix::zeros(rows, d);
        let mut out = Matrix::zeros(rows, d);
        for i in 0..rows {
            for c in 0..d {
                let ni = (a.get(i, 2 * d + c) + nu.get(i, c) + b[2 * d + c]).tanh();
                n.set(i, c, ni);
                let zi = z.get(i, c);
                out.set(i, c, (T::one() - zi) * ni + zi * h.get(i, c));
            }
        }
        Ok((out, z, r, n))
    }

    /// Returns `(dx, dh)` and accumulates parameter gradients.
    fn step_backward(&mut self, s: &GruStep<T>, dout: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let (rows, d) = s.h.shape();
        let mut dh = Matrix::zeros(rows, d);
        let mut da = Matrix::zeros(rows, 3 * d);
        let mut rh = Matrix::zeros(rows, d);
        for i in 0..rows {
            for c in 0..d {
                let (g, z, n, h) = (dout.get(i, c), s.z.get(i, c), s.n.get(i, c), s.h.get(i, c));
                dh.set(i, c, g * z);
                da.set(i, c, g * (h - n) * z * (T::one() - z));
                da.set(i, 2 * d + c, g * (T::one() - z) * (T::one() - n * n));
                rh.set(i, c, s.r.get(i, c) * h);
            }
        }
        let mut dn_pre = Matrix::zeros(rows, d);
        for i in 0..rows {
            dn_pre.row_mut(i).copy_from_slice(&da.row(i)[2 * d..]);
        }
        self.un.grad.add_scaled(T::one(), &rh.t_matmul(&dn_pre)?)?;
        let drh = dn_pre.matmul_t(&self.un.value)?;
        for i in 0..rows {
            for c in 0..d {
                let (r, h) = (s.r.get(i, c), s.h.get(i, c));
                let cur = dh.get(i, c);
                dh.set(i, c, cur + drh.get(i, c) * r);
                da.set(i, d + c, drh.get(i, c) * h * r * (T::one() - r));
            }
        }
        let mut dzr = Matrix::zeros(rows, 2 * d);
        for i in 0..rows {
            dzr.row_mut(i).copy_from_slice(&da.row(i)[..2 * d]);
        }
        self.uzr.grad.add_scaled(T::one(), &s.h.t_matmul(&dzr)?)?;
        dh.add_scaled(T::one(), &dzr.matmul_t(&self.uzr.value)?)?;
        self.wx.grad.add_scaled(T::one(), &s.x.t_matmul(&da)?)?;
        let db = self.bias.grad.row_mut(0);
        for i in 0..rows {
            for (g, &x) in db.iter_mut().zip(da.row(i)) {
                *g += x;
            }
        }
        Ok((da.matmul_t(&self.wx.value)?, dh))
    }
}

/// Single-head attention from the last position over the whole history,
/// with learned positions and a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub positions: Parameter<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
}

#[derive(Debug, Clone)]
struct AttentionRow<T> {
    x: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    q: Matrix<T>,
    alpha: Vec<T>,
    o: Matrix<T>,
}

impl<T: Scalar> SelfAttention<T> {
    fn new(d: usize, max_len: usize, rng: &mut Rng) -> Self {
        let b = (1.0 / d as f64).sqrt();
        Self {
            positions: Parameter::new("attn.positions", uniform(max_len.max(1), d, b, rng)),
            wq: Parameter::new("attn.wq", uniform(d, d, b, rng)),
            wk: Parameter::new("attn.wk", uniform(d, d, b, rng)),
            wv: Parameter::new("attn.wv", uniform(d, d, b, rng)),
            wo: Parameter::new("attn.wo", uniform(d, d, b, rng)),
        }
    }

    fn forward_row(&self, emb: &Matrix<T>, hist: &[u32]) -> Result<(Vec<T>, AttentionRow<T>)> {
        let (l, d) = (hist.len(), emb.cols());
        if l > self.positions.value.rows() {
            return Err(RecError::Input(format!(
                "history length {l} exceeds the {} learned positions",
                self.positions.value.rows()
            )));
        }
        let mut x = gather(emb, hist);
        for j in 0..l {
            for (a, &p) in x.row_mut(j).iter_mut().zip(self.positions.value.row(j)) {
                *a += p;
            }
        }
        let k = x.matmul(&self.wk.value)?;
        let v = x.matmul(&self.wv.value)?;
        let last = x.select_rows(&[l - 1]);
        let q = last.matmul(&self.wq.value)?;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let scores: Vec<T> = (0..l)
            .map(|j| q.row(0).iter().zip(k.row(j)).map(|(&a, &b)| a * b).sum::<T>() * scale)
            .collect();
        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
        let total: T = e.iter().copied().sum();
        let alpha: Vec<T> = e.iter().map(|&x| x / total).collect();
        let mut o = Matrix::zeros(1, d);
        for j in 0..l {
            for (a, &b) in o.row_mut(0).iter_mut().zip(v.row(j)) {
                *a += alpha[j] * b;
            }
        }
        let y = o.matmul(&self.wo.value)?;
        let out: Vec<T> = y.row(0).iter().zip(last.row(0)).map(|(&a, &b)| a + b).collect();
        Ok((out, AttentionRow { x, k, v, q, alpha, o }))
    }

    /// Returns the gradient wrt the history embeddings (one row per position).
    fn backward_row(&mut self, c: &AttentionRow<T>, g: &[T]) -> Result<Matrix<T>> {
        let (l, d) = c.x.shape();
        let g = Matrix::from_vec(1, d, g.to_vec())?;
        self.wo.grad.add_scaled(T::one(), &c.o.t_matmul(&g)?)?;
        let d_o = g.matmul_t(&self.wo.value)?;
        let mut dx = Matrix::zeros(l, d);
        dx.row_mut(l - 1).copy_from_slice(g.row(0));
        let dalpha: Vec<T> = (0..l)
            .map(|j| d_o.row(0).iter().zip(c.v.row(j)).map(|(&a, &b)| a * b).sum())
            .collect();
        let mut dv = Matrix::zeros(l, d);
        for j in 0..l {
            for (a, &b) in dv.row_mut(j).iter_mut().zip(d_o.row(0)) {
                *a = c.alpha[j] * b;
            }
        }
        let mean: T = c.alpha.iter().zip(&dalpha).map(|(&a, &b)| a * b).sum();
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let ds: Vec<T> = (0..l).map(|j| c.alpha[j] * (dalpha[j] - mean) * scale).collect();
        let mut dq = Matrix::zeros(1, d);
        let mut dk = Matrix::zeros(l, d);
        for j in 0..l {
            for col in 0..d {
                let cur = dq.get(0, col);
                dq.set(0, col, cur + ds[j] * c.k.get(j, col));
                dk.set(j, col, ds[j] * c.q.get(0, col));
            }
        }
        self.wv.grad.add_scaled(T::one(), &c.x.t_matmul(&dv)?)?;
        self.wk.grad.add_scaled(T::one(), &c.x.t_matmul(&dk)?)?;
        let last = c.x.select_rows(&[l - 1]);
        self.wq.grad.add_scaled(T::one(), &last.t_matmul(&dq)?)?;
        dx.add_scaled(T::one(), &dv.matmul_t(&self.wv.value)?)?;
        dx.add_scaled(T::one(), &dk.matmul_t(&self.wk.value)?)?;
        let dlast = dq.matmul_t(&self.wq.value)?;
        for (a, &b) in dx.row_mut(l - 1).iter_mut().zip(dlast.row(0)) {
            *a += b;
        }
        for j in 0..l {
            for (a, &b) in self.positions.grad.row_mut(j).iter_mut().zip(dx.row(j)) {
                *a += b;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone<T> {
    Pooled,
    Recurrent(GruCell<T>),
    SelfAttention(SelfAttention<T>),
}

/// Forward state of [`Backbone::encode`].
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    histories: Vec<Vec<u32>>,
    gru_steps: Vec<GruStep<T>>,
    attention: Vec<Option<AttentionRow<T>>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(kind: BackboneKind, d: usize, max_len: usize, rng: &mut Rng) -> Result<Self> {
        match kind {
            BackboneKind::PooledMlp => Ok(Backbone::Pooled),
            BackboneKind::Recurrent => Ok(Backbone::Recurrent(GruCell::new(d, rng))),
            BackboneKind::SelfAttention => {
                if cfg!(feature = "self-attention") {
                    Ok(Backbone::SelfAttention(SelfAttention::new(d, max_len, rng)))
                } else {
                    Err(RecError::Config(
                        "the self-attention backbone is disabled in this build".into(),
                    ))
                }
            }
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Pooled => BackboneKind::PooledMlp,
            Backbone::Recurrent(_) => BackboneKind::Recurrent,
            Backbone::SelfAttention(_) => BackboneKind::SelfAttention,
        }
    }

    /// One summary row per history.
    pub fn encode(
        &self,
        emb: &Matrix<T>,
        start: &[T],
        histories: &[&[u32]],
    ) -> Result<(Matrix<T>, BackboneCache<T>)> {
        let d = emb.cols();
        let b = histories.len();
        let mut out = Matrix::zeros(b, d);
        let mut cache = BackboneCache {
            histories: histories.iter().map(|h| h.to_vec()).collect(),
            gru_steps: Vec::new(),
            attention: Vec::new(),
        };
        for (r, h) in histories.iter().enumerate() {
            if let Some(&bad) = h.iter().find(|&&i| i == 0 || i as usize >= emb.rows()) {
                return Err(RecError::Input(format!("history item {bad} outside the vocabulary")));
            }
            if h.is_empty() {
                out.row_mut(r).copy_from_slice(start);
            }
        }
        match self {
            Backbone::Pooled => {
                for (r, h) in histories.iter().enumerate() {
                    if h.is_empty() {
                        continue;
                    }
                    let inv = T::lit(1.0 / h.len() as f64);
                    let row = out.row_mut(r);
                    for &i in h.iter() {
                        for (o, &e) in row.iter_mut().zip(emb.row(i as usize)) {
                            *o += inv * e;
                        }
                    }
                }
            }
            Backbone::Recurrent(cell) => {
                let longest = histories.iter().map(|h| h.len()).max().unwrap_or(0);
                let mut state = Matrix::from_fn(b, d, |_, c| start[c]);
                for t in 0..longest {
                    let rows: Vec<usize> = (0..b).filter(|&r| histories[r].len() > t).collect();
                    let ids: Vec<u32> = rows.iter().map(|&r| histories[r][t]).collect();
                    let x = gather(emb, &ids);
                    let h = state.select_rows(&rows);
                    let (next, z, rg, n) = cell.step(&x, &h)?;
                    for (k, &r) in rows.iter().enumerate() {
                        state.row_mut(r).copy_from_slice(next.row(k));
                    }
                    cache.gru_steps.push(GruStep { t, rows, x, h, z, r: rg, n });
                }
                out = state;
            }
            Backbone::SelfAttention(att) => {
                for (r, h) in histories.iter().enumerate() {
                    if h.is_empty() {
                        cache.attention.push(None);
                        continue;
                    }
                    let (y, c) = att.forward_row(emb, h)?;
                    out.row_mut(r).copy_from_slice(&y);
                    cache.attention.push(Some(c));
                }
            }
        }
        Ok((out, cache))
    }

    /// Accumulates gradients into `emb_grad`, `start_grad` and the backbone's own parameters.
    pub fn backward(
        &mut self,
        cache: &BackboneCache<T>,
        d_out: &Matrix<T>,
        emb_grad: &mut Matrix<T>,
        start_grad: &mut [T],
    ) -> Result<()> {
        let d = d_out.cols();
        match self {
            Backbone::Pooled => {
                for (r, h) in cache.histories.iter().enumerate() {
                    let g = d_out.row(r);
                    if h.is_empty() {
                        start_grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                        continue;
                    }
                    let inv = T::lit(1.0 / h.len() as f64);
                    for &i in h {
                        for (a, &b) in emb_grad.row_mut(i as usize).iter_mut().zip(g) {
                            *a += inv * b;
                        }
                    }
                }
            }
            Backbone::Recurrent(cell) => {
                let mut dstate = d_out.clone();
                for step in cache.gru_steps.iter().rev() {
                    let dout = dstate.select_rows(&step.rows);
                    let (dx, dh) = cell.step_backward(step, &dout)?;
                    for (k, &r) in step.rows.iter().enumerate() {
                        dstate.row_mut(r).copy_from_slice(dh.row(k));
                    }
                    let ids: Vec<u32> = step.rows.iter().map(|&r| cache.histories[r][step.t]).collect();
                    scatter_add(emb_grad, &ids, &dx);
                }
                for r in 0..dstate.rows() {
                    start_grad.iter_mut().zip(dstate.row(r)).for_each(|(a, &b)| *a += b);
                }
            }
            Backbone::SelfAttention(att) => {
                for (r, c) in cache.attention.iter().enumerate() {
                    let g = d_out.row(r);
                    match c {
                        None => start_grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        Some(c) => {
                            let dx = att.backward_row(c, g)?;
                            scatter_add(emb_grad, &cache.histories[r], &dx);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(start_grad.len(), d);
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Backbone::Pooled => Vec::new(),
            Backbone::Recurrent(c) => vec![&mut c.wx, &mut c.uzr, &mut c.un, &mut c.bias],
            Backbone::SelfAttention(a) => vec![&mut a.positions, &mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        match self {
            Backbone::Pooled => Backbone::Pooled,
            Backbone::Recurrent(c) => Backbone::Recurrent(GruCell {
                wx: c.wx.cast(),
                uzr: c.uzr.cast(),
                un: c.un.cast(),
                bias: c.bias.cast(),
            }),
            Backbone::SelfAttention(a) => Backbone::SelfAttention(SelfAttention {
                positions: a.positions.cast(),
                wq: a.wq.cast(),
                wk: a.wk.cast(),
                wv: a.wv.cast(),
                wo: a.wo.cast(),
            }),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Backbone::Pooled => Vec::new(),
            Backbone::Recurrent(c) => vec![&c.wx, &c.uzr, &c.un, &c.bias],
            Backbone::SelfAttention(a) => vec![&a.positions, &a.wq, &a.wk, &a.wv, &a.wo],
        }
    }
}
