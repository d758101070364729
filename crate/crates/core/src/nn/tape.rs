//! Reverse-mode automatic differentiation over `Array2<f64>` values.
//!
//! A `Tape` records each op as a node with per-parent backward closures.
//! Everything is float64 and single-threaded per tape; batch parallelism
//! happens one tape per sample with a fixed-order gradient reduction.

use std::ops::Range;

use ndarray::{s, Array2, Axis};

type BackFn = Box<dyn Fn(&Array2<f64>) -> Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct Tape {
    values: Vec<Array2<f64>>,
    backs: Vec<Vec<(usize, BackFn)>>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backs: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that skips recording backward closures (frozen-model forward).
    pub fn no_grad() -> Self {
        Self {
            values: Vec::new(),
            backs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Array2<f64>, backs: Vec<(Var, BackFn)>) -> Var {
        self.values.push(value);
        self.backs.push(if self.grad_enabled {
            backs.into_iter().map(|(v, f)| (v.0, f)).collect()
        } else {
            Vec::new()
        });
        Var(self.values.len() - 1)
    }

    /// Leaf node (input or parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new())
    }

    /// Backpropagates from a 1×1 scalar root; returns one gradient per node.
    pub fn backward(&self, root: Var) -> Vec<Array2<f64>> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.values[root.0].dim(), (1, 1), "root must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .values
            .iter()
            .map(|v| Array2::zeros(v.dim()))
            .collect();
        let mut live = vec![false; self.values.len()];
        grads[root.0][(0, 0)] = 1.0;
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            let g = std::mem::replace(&mut grads[i], Array2::zeros((0, 0)));
            for (parent, f) in &self.backs[i] {
                let contrib = f(&g);
                grads[*parent] += &contrib;
                live[*parent] = true;
            }
            grads[i] = g;
        }
        grads
    }

    pub fn grad_of(grads: &[Array2<f64>], v: Var) -> &Array2<f64> {
        &grads[v.0]
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![
                (a, Box::new(|g: &Array2<f64>| g.clone())),
                (b, Box::new(|g: &Array2<f64>| g.clone())),
            ],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![
                (a, Box::new(|g: &Array2<f64>| g.clone())),
                (b, Box::new(|g: &Array2<f64>| -g)),
            ],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = &av * &bv;
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &Array2<f64>| g * &bv)),
                (b, Box::new(move |g: &Array2<f64>| g * &av)),
            ],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, vec![(a, Box::new(move |g: &Array2<f64>| g * c))])
    }

    /// Adds a 1×m row, broadcast over all rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        let v = self.value(a) + &rv.row(0);
        self.push(
            v,
            vec![
                (a, Box::new(|g: &Array2<f64>| g.clone())),
                (
                    row,
                    Box::new(|g: &Array2<f64>| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ),
            ],
        )
    }

    /// Multiplies each row of `a` elementwise by a 1×m row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a).clone();
        let rv = self.value(row).clone();
        let v = &av * &rv.row(0);
        let rv2 = rv.clone();
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &Array2<f64>| g * &rv2.row(0))),
                (
                    row,
                    Box::new(move |g: &Array2<f64>| {
                        (g * &av).sum_axis(Axis(0)).insert_axis(Axis(0))
                    }),
                ),
            ],
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let vc = v.clone();
        self.push(
            v,
            vec![(a, Box::new(move |g: &Array2<f64>| g * &(1.0 - &vc * &vc)))],
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let vc = v.clone();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| g * &(&vc * &(1.0 - &vc))),
            )],
        )
    }

    /// SiLU: `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let v = av.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    g * &av.mapv(|x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        s * (1.0 + x * (1.0 - s))
                    })
                }),
            )],
        )
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = av.dot(&bv);
        let av2 = av.clone();
        let bv2 = bv.clone();
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &Array2<f64>| g.dot(&bv2.t()))),
                (b, Box::new(move |g: &Array2<f64>| av2.t().dot(g))),
            ],
        )
    }

    /// `a · bᵀ` without materializing a transpose node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = av.dot(&bv.t());
        let av2 = av.clone();
        let bv2 = bv.clone();
        self.push(
            v,
            vec![
                (a, Box::new(move |g: &Array2<f64>| g.dot(&bv2))),
                (b, Box::new(move |g: &Array2<f64>| g.t().dot(&av2))),
            ],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut offset = 0;
        let mut backs: Vec<(Var, BackFn)> = Vec::new();
        for &p in parts {
            let w = self.value(p).ncols();
            v.slice_mut(s![.., offset..offset + w])
                .assign(self.value(p));
            let r = offset..offset + w;
            backs.push((
                p,
                Box::new(move |g: &Array2<f64>| g.slice(s![.., r.clone()]).to_owned()),
            ));
            offset += w;
        }
        self.push(v, backs)
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Var {
        let (n, m) = self.value(a).dim();
        let v = self.value(a).slice(s![.., range.clone()]).to_owned();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let mut out = Array2::zeros((n, m));
                    out.slice_mut(s![.., range.clone()]).assign(g);
                    out
                }),
            )],
        )
    }

    // -- normalization & softmax -------------------------------------------

    /// Per-row layer norm without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let m = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let centered = &x - &mean.clone().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).mean_axis(Axis(1)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let y = &centered * &inv_std.clone().insert_axis(Axis(1));
        let yc = y.clone();
        self.push(
            y,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    // dx = (g − mean(g) − y·mean(g∘y)) / std, per row
                    let gm = g.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    let gym = (g * &yc).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    let _ = m;
                    (g - &gm - &(&yc * &gym)) * &inv_std.clone().insert_axis(Axis(1))
                }),
            )],
        )
    }

    /// Per-row RMS norm: `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let ms = x.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
        let inv_rms = ms.mapv(|v| 1.0 / (v + eps).sqrt());
        let y = &x * &inv_rms.clone().insert_axis(Axis(1));
        let yc = y.clone();
        self.push(
            y,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    // dx = (g − y·mean(g∘y)·(ms/(ms+eps))) / rms; the eps term
                    // folds into using y itself: dx = inv_rms·(g − y·mean(g∘y)·s)
                    // with s = ms/(ms+eps).
                    let s = ms.mapv(|v| v / (v + eps)).insert_axis(Axis(1));
                    let gym = (g * &yc).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    (g - &(&yc * &(&gym * &s))) * &inv_rms.clone().insert_axis(Axis(1))
                }),
            )],
        )
    }

    /// Row-wise softmax; `mask` (if given) is added to the logits first and is
    /// treated as a constant.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<f64>>) -> Var {
        let mut x = self.value(a).clone();
        if let Some(m) = mask {
            x += m;
        }
        let mut p = x;
        for mut row in p.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let pc = p.clone();
        self.push(
            p,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let dot = (g * &pc).sum_axis(Axis(1)).insert_axis(Axis(1));
                    &pc * &(g - &dot)
                }),
            )],
        )
    }

    // -- pooling -----------------------------------------------------------

    /// Replaces every row with its segment's column mean (broadcast back).
    pub fn segment_mean(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.dim());
        for seg in segments {
            let mean = x
                .slice(s![seg.clone(), ..])
                .mean_axis(Axis(0))
                .unwrap();
            for i in seg.clone() {
                v.row_mut(i).assign(&mean);
            }
        }
        let segs = segments.to_vec();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let mut out = Array2::zeros(g.dim());
                    for seg in &segs {
                        let n = seg.len() as f64;
                        let gsum = g.slice(s![seg.clone(), ..]).sum_axis(Axis(0)) / n;
                        for i in seg.clone() {
                            out.row_mut(i).assign(&gsum);
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Replaces every row with its segment's column max (broadcast back).
    pub fn segment_max(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let x = self.value(a);
        let (_, m) = x.dim();
        let mut v = Array2::zeros(x.dim());
        let mut argmax: Vec<Vec<usize>> = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut arg = vec![seg.start; m];
            let mut best = x.row(seg.start).to_owned();
            for i in seg.clone().skip(1) {
                for j in 0..m {
                    if x[(i, j)] > best[j] {
                        best[j] = x[(i, j)];
                        arg[j] = i;
                    }
                }
            }
            for i in seg.clone() {
                v.row_mut(i).assign(&best);
            }
            argmax.push(arg);
        }
        let segs = segments.to_vec();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let mut out = Array2::zeros(g.dim());
                    for (seg, arg) in segs.iter().zip(&argmax) {
                        for j in 0..g.ncols() {
                            let gsum: f64 = seg.clone().map(|i| g[(i, j)]).sum();
                            out[(arg[j], j)] += gsum;
                        }
                    }
                    out
                }),
            )],
        )
    }

    // -- row masking and losses --------------------------------------------

    /// Zeroes the rows where `mask` is true.
    pub fn zero_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut v = self.value(a).clone();
        for (i, &z) in mask.iter().enumerate() {
            if z {
                v.row_mut(i).fill(0.0);
            }
        }
        let m = mask.to_vec();
        self.push(
            v,
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let mut out = g.clone();
                    for (i, &z) in m.iter().enumerate() {
                        if z {
                            out.row_mut(i).fill(0.0);
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// `Σ_i w_i ||a_i||²` over rows, as a 1×1 scalar.
    pub fn weighted_sqnorm(&mut self, a: Var, weights: &[f64]) -> Var {
        let x = self.value(a).clone();
        let mut sum = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            sum += weights[i] * row.iter().map(|v| v * v).sum::<f64>();
        }
        let w = weights.to_vec();
        self.push(
            Array2::from_elem((1, 1), sum),
            vec![(
                a,
                Box::new(move |g: &Array2<f64>| {
                    let s = 2.0 * g[(0, 0)];
                    let mut out = x.clone();
                    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|v| v * w[i] * s);
                    }
                    out
                }),
            )],
        )
    }

    /// Mean binary cross-entropy from logits (n×1) against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits).clone();
        let n = z.nrows() as f64;
        let mut sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let x = z[(i, 0)];
            // log(1+e^x) evaluated stably
            let log1pe = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            sum += log1pe - y * x;
        }
        let labels = labels.to_vec();
        self.push(
            Array2::from_elem((1, 1), sum / n),
            vec![(
                logits,
                Box::new(move |g: &Array2<f64>| {
                    let s = g[(0, 0)] / n;
                    let mut out = z.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        let sig = 1.0 / (1.0 + (-out[(i, 0)]).exp());
                        out[(i, 0)] = s * (sig - y);
                    }
                    out
                }),
            )],
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Central finite-difference check of d(scalar)/d(leaf) for a closure
    /// rebuilding the graph from leaf values. The closure must create its
    /// leaves via `leaves_of` and return the scalar root; leaves come first
    /// on the tape, so their gradients sit at indices 0..leaves.len().
    fn fd_check(build: impl Fn(&mut Tape, &[Array2<f64>]) -> Var, leaves: &[Array2<f64>]) {
        let mut tape = Tape::new();
        let root = build(&mut tape, leaves);
        let grads = tape.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for idx in 0..leaf.len() {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let eval = |delta: f64| -> f64 {
                    let mut ls: Vec<Array2<f64>> = leaves.to_vec();
                    ls[li][(r, c)] += delta;
                    let mut t = Tape::no_grad();
                    let root = build(&mut t, &ls);
                    t.value(root)[(0, 0)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[li][(r, c)];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "leaf {li} entry ({r},{c}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    // build functions re-create leaves from the passed values so FD can vary them
    fn leaves_of(t: &mut Tape, ls: &[Array2<f64>]) -> Vec<Var> {
        ls.iter().map(|l| t.leaf(l.clone())).collect()
    }

    fn rand_mat(rng: &mut ChaCha12Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                let c = t.matmul(v[0], v[1]);
                let c = t.tanh(c);
                let w = vec![1.0; 3];
                t.weighted_sqnorm(c, &w)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_softmax_masked() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 4);
        let mut mask = Array2::zeros((4, 4));
        mask[(0, 3)] = -1e300;
        mask[(1, 2)] = -1e300;
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                let mut m = Array2::zeros((4, 4));
                m[(0, 3)] = -1e300;
                m[(1, 2)] = -1e300;
                let p = t.softmax_rows(v[0], Some(&m));
                t.weighted_sqnorm(p, &[0.3, 0.4, 0.2, 0.1])
            },
            &[a],
        );
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 5);
        let dir = rand_mat(&mut rng, 3, 5);
        // project onto a random direction so the scalar is sensitive to the
        // direction of each normalized row, not just its (constant) norm
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                let x = t.layer_norm_rows(v[0], 1e-6);
                let y = t.rms_norm_rows(x, 1e-6);
                let p = t.mul(y, v[1]);
                let p = t.tanh(p);
                t.weighted_sqnorm(p, &[0.5, 0.25, 0.25])
            },
            &[a, dir],
        );
    }

    #[test]
    fn grad_pooling_and_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 6, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let segs = vec![0..2, 2..6];
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                let segs = vec![0..2usize, 2..6];
                let m = t.segment_mean(v[0], &segs);
                let mx = t.segment_max(v[0], &segs);
                let c = t.concat_cols(&[m, mx]);
                let c = t.slice_cols(c, 1..5);
                let c = t.mul_row(c, v[1]);
                let c = t.silu(c);
                t.weighted_sqnorm(c, &[0.1; 6])
            },
            &[a, {
                let mut r = row;
                // widen row to 4 cols to match sliced width
                r = Array2::from_shape_fn((1, 4), |(_, j)| r[(0, j.min(2))]);
                r
            }],
        );
        let _ = segs;
    }

    #[test]
    fn grad_bce() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z = rand_mat(&mut rng, 5, 1);
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0])
            },
            &[z],
        );
    }

    #[test]
    fn grad_attention_like_block() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 6);
        let wq = rand_mat(&mut rng, 6, 6);
        let wk = rand_mat(&mut rng, 6, 6);
        let wv = rand_mat(&mut rng, 6, 6);
        fd_check(
            |t, ls| {
                let v = leaves_of(t, ls);
                let q = t.matmul(v[0], v[1]);
                let k = t.matmul(v[0], v[2]);
                let val = t.matmul(v[0], v[3]);
                let q = t.rms_norm_rows(q, 1e-8);
                let k = t.rms_norm_rows(k, 1e-8);
                let scores = t.matmul_nt(q, k);
                let scores = t.scale(scores, 1.0 / (6f64).sqrt());
                let p = t.softmax_rows(scores, None);
                let o = t.matmul(p, val);
                let o = t.zero_rows(o, &[true, false, false, false]);
                t.weighted_sqnorm(o, &[0.25; 4])
            },
            &[x, wq, wk, wv],
        );
    }

    #[test]
    fn zero_rows_is_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let z = tape.zero_rows(a, &[true, false]);
        assert_eq!(tape.value(z), &array![[0.0, 0.0], [3.0, 4.0]]);
    }
}
