use super::{GnnError, Result};
use crate::graph::SelfLoop;
use crate::numerics::{leaky_relu_grad, Matrix, Parameter, Rng, Scalar};

/// One graph attention layer with `heads` concatenated heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer<T> {
    /// `D_in × D_out` projection applied as `x W`.
    pub weight: Parameter<T>,
    /// `heads × 2·(D_out / heads)`: target half then neighbor half per head.
    pub attention: Parameter<T>,
    pub heads: usize,
    pub slope: f64,
}

/// Forward state needed by [`GatLayer::backward`].
#[derive(Debug, Clone)]
pub struct GatCache<T> {
    sources: Matrix<T>,
    targets: Matrix<T>,
    proj_s: Matrix<T>,
    proj_t: Matrix<T>,
    /// Per target, `heads × |N_t|` attention logits before the LeakyReLU.
    logits: Vec<Vec<T>>,
    /// Per target, `heads × |N_t|` attention weights.
    alphas: Vec<Vec<T>>,
}

impl<T: Scalar> GatCache<T> {
    /// Attention weights of `target`, head-major.
    pub fn attention(&self, target: usize) -> &[T] {
        &self.alphas[target]
    }
}

/// Neighbor of a target: a source row or the target itself.
#[derive(Clone, Copy)]
enum Slot {
    Source(usize),
    Own,
}

fn slots(list: &[u32], self_loop: SelfLoop) -> impl Iterator<Item = Slot> + '_ {
    list.iter()
        .map(|&j| Slot::Source(j as usize))
        .chain(self_loop.includes(list.len()).then_some(Slot::Own))
}

impl<T: Scalar> GatLayer<T> {
    pub fn new(name: &str, d_in: usize, d_out: usize, heads: usize, slope: f64, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_out % heads != 0 {
            return Err(GnnError::Config(format!(
                "output width {d_out} is not divisible into {heads} heads"
            )));
        }
        let dh = d_out / heads;
        let wb = (6.0 / (d_in + d_out) as f64).sqrt();
        let ab = (6.0 / (2 * dh + 1) as f64).sqrt();
        Ok(Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Matrix::from_fn(d_in, d_out, |_, _| T::lit(rng.uniform(-wb, wb))),
            ),
            attention: Parameter::new(
                format!("{name}.attention"),
                Matrix::from_fn(heads, 2 * dh, |_, _| T::lit(rng.uniform(-ab, ab))),
            ),
            heads,
            slope,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    fn head_dim(&self) -> usize {
        self.d_out() / self.heads
    }

    /// Aggregates, for every target row `t`, the projected sources in
    /// `neighbors[t]` (plus the target itself as `self_loop` dictates).
    pub fn forward(
        &self,
        neighbors: &[Vec<u32>],
        sources: &Matrix<T>,
        targets: &Matrix<T>,
        self_loop: SelfLoop,
    ) -> Result<(Matrix<T>, GatCache<T>)> {
        if neighbors.len() != targets.rows() {
            return Err(GnnError::Shape(format!(
                "{} neighbor lists for {} targets",
                neighbors.len(),
                targets.rows()
            )));
        }
        if sources.cols() != self.d_in() || targets.cols() != self.d_in() {
            return Err(GnnError::Shape(format!(
                "inputs have {}/{} columns, layer expects {}",
                sources.cols(),
                targets.cols(),
                self.d_in()
            )));
        }
        let proj_s = sources.matmul(&self.weight.value)?;
        let proj_t = targets.matmul(&self.weight.value)?;
        let (heads, dh) = (self.heads, self.head_dim());
        let slope = T::lit(self.slope);
        let mut out = Matrix::zeros(targets.rows(), self.d_out());
        let mut logits = Vec::with_capacity(targets.rows());
        let mut alphas = Vec::with_capacity(targets.rows());
        for (t, list) in neighbors.iter().enumerate() {
            if let Some(&bad) = list.iter().find(|&&j| j as usize >= sources.rows()) {
                return Err(GnnError::Shape(format!("neighbor {bad} of target {t} out of range")));
            }
            let n = list.len() + usize::from(self_loop.includes(list.len()));
            if n == 0 {
                return Err(GnnError::EmptyNeighborhood(t));
            }
            let mut u = Vec::with_capacity(heads * n);
            let mut a = Vec::with_capacity(heads * n);
            for h in 0..heads {
                let att = self.attention.value.row(h);
                let (al, ar) = att.split_at(dh);
                let pt = &proj_t.row(t)[h * dh..(h + 1) * dh];
                let left: T = al.iter().zip(pt).map(|(&x, &y)| x * y).sum();
                let base = u.len();
                for s in slots(list, self_loop) {
                    let pj = match s {
                        Slot::Source(j) => &proj_s.row(j)[h * dh..(h + 1) * dh],
                        Slot::Own => pt,
                    };
                    let right: T = ar.iter().zip(pj).map(|(&x, &y)| x * y).sum();
                    u.push(left + right);
                }
                let z: Vec<T> = u[base..]
                    .iter()
                    .map(|&x| if x > T::zero() { x } else { slope * x })
                    .collect();
                let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = z.iter().map(|&x| (x - m).exp()).collect();
                let sum: T = e.iter().copied().sum();
                let row = out.row_mut(t);
                for (s, &ei) in slots(list, self_loop).zip(&e) {
                    let alpha = ei / sum;
                    a.push(alpha);
                    let pj = match s {
                        Slot::Source(j) => &proj_s.row(j)[h * dh..(h + 1) * dh],
                        Slot::Own => &proj_t.row(t)[h * dh..(h + 1) * dh],
                    };
                    for (o, &p) in row[h * dh..(h + 1) * dh].iter_mut().zip(pj) {
                        *o += alpha * p;
                    }
                }
            }
            logits.push(u);
            alphas.push(a);
        }
        let cache = GatCache {
            sources: sources.clone(),
            targets: targets.clone(),
            proj_s,
            proj_t,
            logits,
            alphas,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns `(d sources, d targets)`.
    ///
    /// Target rows whose upstream gradient is exactly zero are skipped.
    pub fn backward(
        &mut self,
        neighbors: &[Vec<u32>],
        self_loop: SelfLoop,
        cache: &GatCache<T>,
        d_out: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        if d_out.shape() != (neighbors.len(), self.d_out()) || cache.alphas.len() != neighbors.len() {
            return Err(GnnError::Shape("gradient or cache does not match this forward pass".into()));
        }
        let (heads, dh) = (self.heads, self.head_dim());
        let slope = T::lit(self.slope);
        let mut dps = Matrix::zeros(cache.proj_s.rows(), self.d_out());
        let mut dpt = Matrix::zeros(cache.proj_t.rows(), self.d_out());
        let mut datt = Matrix::zeros(heads, 2 * dh);
        for (t, list) in neighbors.iter().enumerate() {
            let g_row = d_out.row(t);
            if g_row.iter().all(|&g| g == T::zero()) {
                continue;
            }
            let n = list.len() + usize::from(self_loop.includes(list.len()));
            for h in 0..heads {
                let g = &g_row[h * dh..(h + 1) * dh];
                let alpha = &cache.alphas[t][h * n..(h + 1) * n];
                let logit = &cache.logits[t][h * n..(h + 1) * n];
                let att = self.attention.value.row(h);
                let (al, ar) = att.split_at(dh);
                let pt = &cache.proj_t.row(t)[h * dh..(h + 1) * dh];
                let proj = |s: Slot| match s {
                    Slot::Source(j) => &cache.proj_s.row(j)[h * dh..(h + 1) * dh],
                    Slot::Own => pt,
                };
                let dalpha: Vec<T> = slots(list, self_loop)
                    .map(|s| g.iter().zip(proj(s)).map(|(&x, &y)| x * y).sum())
                    .collect();
                let mean: T = alpha.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
                let mut dleft = T::zero();
                for (k, s) in slots(list, self_loop).enumerate() {
                    let du = alpha[k] * (dalpha[k] - mean) * leaky_relu_grad(logit[k], slope);
                    dleft += du;
                    let pj = proj(s);
                    let drow = datt.row_mut(h);
                    for c in 0..dh {
                        drow[c] += du * pt[c];
                        drow[dh + c] += du * pj[c];
                    }
                    let dst = match s {
                        Slot::Source(j) => &mut dps.row_mut(j)[h * dh..(h + 1) * dh],
                        Slot::Own => &mut dpt.row_mut(t)[h * dh..(h + 1) * dh],
                    };
                    for c in 0..dh {
                        dst[c] += du * ar[c] + alpha[k] * g[c];
                    }
                }
                let dpt_row = &mut dpt.row_mut(t)[h * dh..(h + 1) * dh];
                for c in 0..dh {
                    dpt_row[c] += dleft * al[c];
                }
            }
        }
        self.attention.grad.add_scaled(T::one(), &datt)?;
        self.weight.grad.add_scaled(T::one(), &cache.sources.t_matmul(&dps)?)?;
        self.weight.grad.add_scaled(T::one(), &cache.targets.t_matmul(&dpt)?)?;
        Ok((dps.matmul_t(&self.weight.value)?, dpt.matmul_t(&self.weight.value)?))
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.attention]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.attention]
    }

    pub fn cast<U: Scalar>(&self) -> GatLayer<U> {
        GatLayer {
            weight: self.weight.cast(),
            attention: self.attention.cast(),
            heads: self.heads,
            slope: self.slope,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, HasParameters};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    /// Scalar-loop transcription of the attention formula.
    fn reference(layer: &GatLayer<f64>, list: &[u32], src: &Matrix<f64>, tgt: &[f64], self_loop: SelfLoop) -> Vec<f64> {
        let w = &layer.weight.value;
        let project = |x: &[f64]| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
        };
        let pt = project(tgt);
        let mut members: Vec<Vec<f64>> = list.iter().map(|&j| project(src.row(j as usize))).collect();
        if self_loop.includes(list.len()) {
            members.push(pt.clone());
        }
        let dh = w.cols() / layer.heads;
        let mut out = vec![0.0; w.cols()];
        for h in 0..layer.heads {
            let a = layer.attention.value.row(h);
            let scores: Vec<f64> = members
                .iter()
                .map(|pj| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += a[c] * pt[h * dh + c] + a[dh + c] * pj[h * dh + c];
                    }
                    if s > 0.0 { s } else { layer.slope * s }
                })
                .collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for (pj, s) in members.iter().zip(&scores) {
                for c in 0..dh {
                    out[h * dh + c] += s.exp() / total * pj[h * dh + c];
                }
            }
        }
        out
    }

    #[test]
    fn single_neighbor_returns_its_projection() {
        let mut rng = Rng::new(1);
        let layer = GatLayer::<f64>::new("g", 4, 4, 1, 0.2, &mut rng).unwrap();
        let src = rand_matrix(3, 4, &mut rng);
        let tgt = rand_matrix(1, 4, &mut rng);
        let (h, cache) = layer.forward(&[vec![2]], &src, &tgt, SelfLoop::Never).unwrap();
        let expected = src.select_rows(&[2]).matmul(&layer.weight.value).unwrap();
        for (a, b) in h.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cache.attention(0), &[1.0]);
    }

    #[test]
    fn identical_neighbors_split_attention_evenly() {
        let mut rng = Rng::new(2);
        let layer = GatLayer::<f64>::new("g", 3, 4, 2, 0.2, &mut rng).unwrap();
        let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let src = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let tgt = rand_matrix(1, 3, &mut rng);
        let (_, cache) = layer.forward(&[vec![0, 1]], &src, &tgt, SelfLoop::Never).unwrap();
        for &a in cache.attention(0) {
            assert!((a - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = Rng::new(3);
        for heads in [1, 2, 4] {
            let layer = GatLayer::<f64>::new("g", 6, 8, heads, 0.2, &mut rng).unwrap();
            let src = rand_matrix(10, 6, &mut rng);
            let lists = vec![vec![0, 3, 5, 7, 9], vec![1], vec![2, 2, 8], vec![]];
            for self_loop in [SelfLoop::Never, SelfLoop::Always, SelfLoop::IfIsolated] {
                let lists = &lists[..if self_loop == SelfLoop::Never { 3 } else { 4 }];
                let tgt = rand_matrix(lists.len(), 6, &mut rng);
                let (h, _) = layer.forward(lists, &src, &tgt, self_loop).unwrap();
                for t in 0..lists.len() {
                    let r = reference(&layer, &lists[t], &src, tgt.row(t), self_loop);
                    for (a, b) in h.row(t).iter().zip(&r) {
                        assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_neighborhood_is_an_error() {
        let mut rng = Rng::new(4);
        let layer = GatLayer::<f64>::new("g", 2, 2, 1, 0.2, &mut rng).unwrap();
        let m = rand_matrix(1, 2, &mut rng);
        assert!(matches!(
            layer.forward(&[vec![]], &m, &m, SelfLoop::Never),
            Err(GnnError::EmptyNeighborhood(0))
        ));
        assert!(layer.forward(&[vec![]], &m, &m, SelfLoop::Always).is_ok());
        let (h, _) = layer.forward(&[vec![]], &m, &m, SelfLoop::IfIsolated).unwrap();
        let own = m.matmul(&layer.weight.value).unwrap();
        assert!(h.row(0).iter().zip(own.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(GatLayer::<f64>::new("g", 2, 3, 2, 0.2, &mut rng).is_err());
    }

    struct Probe {
        layer: GatLayer<f64>,
        src: Parameter<f64>,
        tgt: Parameter<f64>,
        mix: Matrix<f64>,
    }

    impl HasParameters<f64> for Probe {
        fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            let [w, a] = self.layer.params_mut();
            vec![w, a, &mut self.src, &mut self.tgt]
        }
    }

    fn probe_loss(p: &Probe, lists: &[Vec<u32>], self_loop: SelfLoop) -> f64 {
        let (h, _) = p.layer.forward(lists, &p.src.value, &p.tgt.value, self_loop).unwrap();
        h.data().iter().zip(p.mix.data()).map(|(a, b)| a * b).sum::<f64>()
            + 0.5 * h.frobenius_sq()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let lists = vec![vec![0, 1, 4], vec![2], vec![], vec![3, 4, 0, 1]];
        for (heads, self_loop) in [
            (1, SelfLoop::Always),
            (2, SelfLoop::Always),
            (2, SelfLoop::Never),
            (2, SelfLoop::IfIsolated),
        ] {
            let lists: Vec<Vec<u32>> = if self_loop != SelfLoop::Never {
                lists.clone()
            } else {
                lists.iter().map(|l| if l.is_empty() { vec![1] } else { l.clone() }).collect()
            };
            let mut p = Probe {
                layer: GatLayer::new("g", 3, 4, heads, 0.2, &mut rng).unwrap(),
                src: Parameter::new("src", rand_matrix(5, 3, &mut rng)),
                tgt: Parameter::new("tgt", rand_matrix(4, 3, &mut rng)),
                mix: rand_matrix(4, 4, &mut rng),
            };
            let (h, cache) = p.layer.forward(&lists, &p.src.value, &p.tgt.value, self_loop).unwrap();
            let mut d = p.mix.clone();
            d.add_scaled(1.0, &h).unwrap();
            let (ds, dt) = p.layer.backward(&lists, self_loop, &cache, &d).unwrap();
            p.src.grad = ds;
            p.tgt.grad = dt;
            let worst = check_gradients(&mut p, 1e-6, |m| probe_loss(m, &lists, self_loop));
            assert!(worst < 1e-4, "heads {heads} {self_loop:?}: {worst}");
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(6);
        let mut layer = GatLayer::<f64>::new("g", 3, 4, 1, 0.2, &mut rng).unwrap();
        let src = rand_matrix(4, 3, &mut rng);
        let tgt = rand_matrix(2, 3, &mut rng);
        let lists = vec![vec![0, 1], vec![2, 3]];
        let (_, cache) = layer.forward(&lists, &src, &tgt, SelfLoop::Always).unwrap();
        let (ds, dt) = layer.backward(&lists, SelfLoop::Always, &cache, &Matrix::zeros(2, 4)).unwrap();
        assert!(ds.data().iter().chain(dt.data()).all(|&x| x == 0.0));
        assert!(layer.weight.grad.data().iter().all(|&x| x == 0.0));
        assert!(layer.attention.grad.data().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attention_normalized_and_permutation_invariant(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = Rng::new(seed);
            let layer = GatLayer::<f64>::new("g", 4, 4, 2, 0.2, &mut rng).unwrap();
            let src = rand_matrix(8, 4, &mut rng);
            let tgt = rand_matrix(1, 4, &mut rng);
            let list: Vec<u32> = (0..n).map(|_| rng.below(8) as u32).collect();
            let mut perm = list.clone();
            rng.shuffle(&mut perm);
            let (h1, c1) = layer.forward(&[list], &src, &tgt, SelfLoop::Always).unwrap();
            let (h2, _) = layer.forward(&[perm], &src, &tgt, SelfLoop::Always).unwrap();
            let att = c1.attention(0);
            for head in att.chunks(n + 1) {
                prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for (a, b) in h1.data().iter().zip(h2.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
