//! Graph layers over node features `[..., N, d]`: GCN, single-head GAT,
//! PPNP propagation, and sigmoid-gated fusion of two layer outputs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graphlearn::Adjacency;
use crate::nn::{init_uniform, ParamStore, Session};
use crate::registry::Registry;
use crate::tensor::{Tensor, Var};

/// Additive attention bias for non-edges.
const MASKED: f64 = -1e30;

/// `D^{-1/2} (A + I·loops) D^{-1/2}`.
pub fn normalize_adjacency(a: &Tensor, self_loops: bool) -> Result<Tensor> {
    let &[n, m] = a.shape() else {
        return Err(Error::InvalidShape {
            op: "normalize_adjacency",
            detail: format!("expected square matrix, got {:?}", a.shape()),
        });
    };
    if n != m {
        return Err(Error::InvalidShape {
            op: "normalize_adjacency",
            detail: format!("expected square matrix, got {:?}", a.shape()),
        });
    }
    let mut m = a.clone();
    if self_loops {
        for i in 0..n {
            m.data_mut()[i * n + i] += 1.0;
        }
    }
    let deg: Vec<f64> = m.data().chunks(n).map(|r| r.iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::IsolatedNode(i));
    }
    let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let d = m.data_mut();
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] *= inv[i] * inv[j];
        }
    }
    Ok(m)
}

/// Solves `A X = B` by LU with partial pivoting; `A` is `[n, n]`, `B` is `[n, k]`.
pub fn lu_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    if a.shape() != [n, n] || b.rank() != 2 || b.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "lu_solve",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = b.shape()[1];
    let mut lu = a.data().to_vec();
    let mut x = b.data().to_vec();
    let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
            .expect("non-empty range");
        if lu[piv * n + col].abs() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            for j in 0..k {
                x.swap(col * k + j, piv * k + j);
            }
        }
        let p = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
            for j in 0..k {
                x[r * k + j] -= f * x[col * k + j];
            }
        }
    }
    for col in (0..n).rev() {
        let p = lu[col * n + col];
        for j in 0..k {
            let mut acc = x[col * k + j];
            for c in col + 1..n {
                acc -= lu[col * n + c] * x[c * k + j];
            }
            x[col * k + j] = acc / p;
        }
    }
    Tensor::new(vec![n, k], x)
}

/// Propagation matrix `α (I − (1−α) Â)^{-1}`.
pub fn ppnp_propagation(a_hat: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("teleport α must lie in (0, 1], got {}", alpha)));
    }
    let n = a_hat.shape()[0];
    let mut sys = a_hat.map(|v| -(1.0 - alpha) * v);
    for i in 0..n {
        sys.data_mut()[i * n + i] += 1.0;
    }
    Ok(lu_solve(&sys, &Tensor::eye(n))?.map(|v| alpha * v))
}

/// Graph-derived constants shared by every layer for one adjacency.
#[derive(Clone, Debug)]
pub struct GraphOps {
    pub n: usize,
    /// Symmetric-normalized adjacency with self-loops.
    pub a_hat: Tensor,
    /// Attention bias: 0 on edges and the diagonal, a large negative elsewhere.
    pub attention_mask: Tensor,
    pub ppnp: Tensor,
}

impl GraphOps {
    pub fn new(adj: &Adjacency, alpha: f64) -> Result<Self> {
        let a = adj.to_tensor();
        let a_hat = normalize_adjacency(&a, true)?;
        let n = adj.n;
        let mask = (0..n * n)
            .map(|i| if i / n == i % n || adj.a[i] != 0 { 0.0 } else { MASKED })
            .collect();
        Ok(Self {
            n,
            ppnp: ppnp_propagation(&a_hat, alpha)?,
            a_hat,
            attention_mask: Tensor::new(vec![n, n], mask)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Gcn {
    pub name: String,
}

impl Gcn {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.weight", name), init_uniform(&[d_in, d_out], d_in, rng))?;
        Ok(Self { name: name.to_owned() })
    }

    /// `relu(Â H W)`.
    pub fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        let hw = h.matmul(s.p(&format!("{}.weight", self.name))?)?;
        s.constant(g.a_hat.clone()).matmul(hw)?.relu()
    }
}

#[derive(Clone, Debug)]
pub struct Ppnp {
    pub name: String,
}

impl Ppnp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.weight", name), init_uniform(&[d_in, d_out], d_in, rng))?;
        Ok(Self { name: name.to_owned() })
    }

    /// `α (I − (1−α)Â)^{-1} H W`.
    pub fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        let hw = h.matmul(s.p(&format!("{}.weight", self.name))?)?;
        s.constant(g.ppnp.clone()).matmul(hw)
    }
}

pub const GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Gat {
    pub name: String,
    pub d_out: usize,
}

impl Gat {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.weight", name), init_uniform(&[d_in, d_out], d_in, rng))?;
        // attention vector split into the halves scoring source and target
        store.add(format!("{}.att_src", name), init_uniform(&[d_out, 1], 2 * d_out, rng))?;
        store.add(format!("{}.att_dst", name), init_uniform(&[d_out, 1], 2 * d_out, rng))?;
        Ok(Self {
            name: name.to_owned(),
            d_out,
        })
    }

    /// Attention coefficients `[..., N, N]`; row `a` is a distribution over
    /// `a`'s neighbours and `a` itself.
    pub fn attention<'t>(&self, s: &Session<'t>, g: &GraphOps, z: Var<'t>) -> Result<Var<'t>> {
        let rank = z.shape().len();
        let src = z.matmul(s.p(&format!("{}.att_src", self.name))?)?;
        let dst = z.matmul(s.p(&format!("{}.att_dst", self.name))?)?.t()?;
        let e = src.add(dst)?.leaky_relu(GAT_SLOPE)?;
        e.add(s.constant(g.attention_mask.clone()))?.softmax(rank - 1)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        let z = h.matmul(s.p(&format!("{}.weight", self.name))?)?;
        self.attention(s, g, z)?.matmul(z)?.relu()
    }
}

/// A spatial aggregation layer over `[..., N, d_in]` node features.
pub trait SpatialLayer {
    fn kind(&self) -> &'static str;
    fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>>;
}

pub type SpatialCtor = fn(&mut ParamStore, &str, usize, usize, &mut ChaCha8Rng) -> Result<Box<dyn SpatialLayer>>;

/// Built-in layers: `gcn`, `gat`, `ppnp`.
pub fn spatial_registry() -> Registry<SpatialCtor> {
    let mut r: Registry<SpatialCtor> = Registry::new("spatial layer");
    r.register("gcn", |st, n, i, o, rng| Ok(Box::new(Gcn::new(st, n, i, o, rng)?)))
        .expect("fresh registry");
    r.register("gat", |st, n, i, o, rng| Ok(Box::new(Gat::new(st, n, i, o, rng)?)))
        .expect("fresh registry");
    r.register("ppnp", |st, n, i, o, rng| Ok(Box::new(Ppnp::new(st, n, i, o, rng)?)))
        .expect("fresh registry");
    r
}

impl SpatialLayer for Gcn {
    fn kind(&self) -> &'static str {
        "gcn"
    }

    fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        Gcn::forward(self, s, g, h)
    }
}

impl SpatialLayer for Gat {
    fn kind(&self) -> &'static str {
        "gat"
    }

    fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        Gat::forward(self, s, g, h)
    }
}

impl SpatialLayer for Ppnp {
    fn kind(&self) -> &'static str {
        "ppnp"
    }

    fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        Ppnp::forward(self, s, g, h)
    }
}

/// `λ H1 + (1−λ) H2` with `λ = σ(logit)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub name: String,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        store.add(format!("{}.logit", name), Tensor::vector(vec![0.0]))?;
        Ok(Self { name: name.to_owned() })
    }

    pub fn coefficient<'t>(&self, s: &Session<'t>) -> Result<Var<'t>> {
        s.p(&format!("{}.logit", self.name))?.sigmoid()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, h1: Var<'t>, h2: Var<'t>) -> Result<Var<'t>> {
        fuse(h1, h2, self.coefficient(s)?)
    }
}

pub fn fuse<'t>(h1: Var<'t>, h2: Var<'t>, lambda: Var<'t>) -> Result<Var<'t>> {
    if h1.shape() != h2.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: h1.shape(),
            rhs: h2.shape(),
        });
    }
    h1.sub(h2)?.mul(lambda)?.add(h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_params;
    use crate::tensor::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};

    fn random_adjacency(n: usize, rng: &mut ChaCha8Rng) -> Adjacency {
        let mut a = vec![0u8; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    a[i * n + j] = 1;
                    a[j * n + i] = 1;
                }
            }
        }
        Adjacency { n, a }
    }

    #[test]
    fn normalization_examples() {
        let i = normalize_adjacency(&Tensor::eye(3), false).unwrap();
        assert_eq!(i, Tensor::eye(3));
        let edge = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(normalize_adjacency(&edge, false).unwrap(), edge);
        let loops = normalize_adjacency(&edge, true).unwrap();
        assert!(loops.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let isolated = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(normalize_adjacency(&isolated, false), Err(Error::IsolatedNode(0))));
    }

    #[test]
    fn lu_solve_matches_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[6, 6], 1.0, &mut rng);
        let b = Tensor::uniform(&[6, 2], 1.0, &mut rng);
        let x = lu_solve(&a, &b).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-10);
        assert!(matches!(lu_solve(&Tensor::zeros(&[2, 2]), &Tensor::ones(&[2, 1])), Err(Error::Singular)));
    }

    #[test]
    fn gcn_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gcn = Gcn::new(&mut store, "g", 3, 3, &mut rng).unwrap();
        let ident = GraphOps {
            n: 4,
            a_hat: Tensor::eye(4),
            attention_mask: Tensor::zeros(&[4, 4]),
            ppnp: Tensor::eye(4),
        };
        *store.get_mut("g.weight").unwrap() = Tensor::eye(3);
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng).map(f64::abs);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        assert_eq!(*gcn.forward(&s, &ident, tape.constant(h.clone())).unwrap().value(), h);
        let z = gcn.forward(&s, &ident, tape.constant(Tensor::zeros(&[4, 3]))).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let mut store = ParamStore::new();
        let gcn = Gcn::new(&mut store, "g", 3, 2, &mut rng).unwrap();
        let g = GraphOps::new(&random_adjacency(4, &mut rng), 0.1).unwrap();
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = gcn.forward(&s, &g, tape.constant(h.clone())).unwrap().value();
        let w = store.get("g.weight").unwrap();
        for a in 0..4 {
            for o in 0..2 {
                let mut acc = 0.0;
                for b in 0..4 {
                    for i in 0..3 {
                        acc += g.a_hat.at(&[a, b]) * h.at(&[b, i]) * w.at(&[i, o]);
                    }
                }
                assert!((y.at(&[a, o]) - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gat_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gat = Gat::new(&mut store, "a", 3, 2, &mut rng).unwrap();

        // isolated node: attention weight 1 on itself
        let lonely = Adjacency {
            n: 2,
            a: vec![0, 0, 0, 0],
        };
        let g = GraphOps {
            n: 2,
            a_hat: Tensor::eye(2),
            attention_mask: Tensor::matrix(2, 2, vec![0.0, MASKED, MASKED, 0.0]).unwrap(),
            ppnp: Tensor::eye(2),
        };
        assert_eq!(lonely.degree(0), 0);
        assert_eq!(GraphOps::new(&Adjacency { n: 2, a: vec![0, 1, 1, 0] }, 0.1).unwrap().attention_mask, Tensor::zeros(&[2, 2]));
        let h = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = gat.forward(&s, &g, tape.constant(h.clone())).unwrap().value();
        let hw = h.matmul(store.get("a.weight").unwrap()).unwrap().map(|v| v.max(0.0));
        assert!(y.max_abs_diff(&hw) < 1e-15);

        // identical features: uniform attention over neighbourhood ∪ self
        let adj = random_adjacency(5, &mut rng);
        let g = GraphOps::new(&adj, 0.1).unwrap();
        let row = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let same = Tensor::new(vec![5, 3], row.data().repeat(5)).unwrap();
        let z = tape.constant(same).matmul(s.p("a.weight").unwrap()).unwrap();
        let att = gat.attention(&s, &g, z).unwrap().value();
        for a in 0..5 {
            let k = adj.degree(a) + 1;
            for b in 0..5 {
                let expect = if a == b || adj.has_edge(a, b) { 1.0 / k as f64 } else { 0.0 };
                assert!((att.at(&[a, b]) - expect).abs() < 1e-12);
            }
        }

        // explicit per-edge oracle on 4 nodes
        let adj = random_adjacency(4, &mut rng);
        let g = GraphOps::new(&adj, 0.1).unwrap();
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let y = gat.forward(&s, &g, tape.constant(h.clone())).unwrap().value();
        let wh = h.matmul(store.get("a.weight").unwrap()).unwrap();
        let (a1, a2) = (store.get("a.att_src").unwrap(), store.get("a.att_dst").unwrap());
        for a in 0..4 {
            let nbrs: Vec<usize> = (0..4).filter(|&b| b == a || adj.has_edge(a, b)).collect();
            let e: Vec<f64> = nbrs
                .iter()
                .map(|&b| {
                    let raw: f64 = (0..2).map(|o| a1.data()[o] * wh.at(&[a, o]) + a2.data()[o] * wh.at(&[b, o])).sum();
                    if raw > 0.0 { raw } else { GAT_SLOPE * raw }
                })
                .collect();
            let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
            for o in 0..2 {
                let acc: f64 = nbrs.iter().zip(&e).map(|(&b, ev)| (ev - mx).exp() / z * wh.at(&[b, o])).sum();
                assert!((y.at(&[a, o]) - acc.max(0.0)).abs() < 1e-10);
            }
        }
        let att = gat.attention(&s, &g, tape.constant(wh)).unwrap().value();
        for row in att.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ppnp_examples_and_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = ppnp_propagation(&Tensor::eye(1), 0.3).unwrap();
        assert!((one.item() - 1.0).abs() < 1e-15);
        let a_hat = normalize_adjacency(&random_adjacency(5, &mut rng).to_tensor(), true).unwrap();
        assert!(ppnp_propagation(&a_hat, 1.0).unwrap().max_abs_diff(&Tensor::eye(5)) < 1e-15);

        for n in [2usize, 5, 10] {
            let a_hat = normalize_adjacency(&random_adjacency(n, &mut rng).to_tensor(), true).unwrap();
            // α = 0.5 keeps the 50-term series well inside 1e-8
            let alpha = 0.5;
            let p = ppnp_propagation(&a_hat, alpha).unwrap();
            let mut term = Tensor::eye(n);
            let mut series = Tensor::zeros(&[n, n]);
            for k in 0..50 {
                let c = alpha * (1.0 - alpha).powi(k);
                series.data_mut().iter_mut().zip(term.data()).for_each(|(s, t)| *s += c * t);
                term = term.matmul(&a_hat).unwrap();
            }
            assert!(p.max_abs_diff(&series) < 1e-8, "n={}", n);
        }
    }

    #[test]
    fn fusion_examples() {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (Tensor::uniform(&[3, 2], 1.0, &mut rng), Tensor::uniform(&[3, 2], 1.0, &mut rng));
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = f.forward(&s, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
        for ((y, a), b) in y.data().iter().zip(a.data()).zip(b.data()) {
            assert!((y - (a + b) / 2.0).abs() < 1e-15);
            assert!(*y >= a.min(*b) && *y <= a.max(*b));
        }
        *store.get_mut("f.logit").unwrap() = Tensor::vector(vec![40.0]);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = f.forward(&s, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
        assert!(y.max_abs_diff(&a) < 1e-12);
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(f.forward(&s, tape.constant(a.clone()), bad).is_err());
    }

    #[test]
    fn layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let gcn = Gcn::new(&mut store, "gcn", 3, 4, &mut rng).unwrap();
        let gat = Gat::new(&mut store, "gat", 3, 4, &mut rng).unwrap();
        let ppnp = Ppnp::new(&mut store, "ppnp", 3, 4, &mut rng).unwrap();
        let fusion = Fusion::new(&mut store, "fuse").unwrap();
        *store.get_mut("fuse.logit").unwrap() = Tensor::vector(vec![0.4]);
        let g = GraphOps::new(&random_adjacency(4, &mut rng), 0.2).unwrap();
        let h = Tensor::uniform(&[2, 4, 3], 1.0, &mut rng);
        let wt = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let r = gradcheck::check(
            |tape, v| {
                let s = Session::eval(tape, &store);
                let a = gcn.forward(&s, &g, v[0])?;
                let b = gat.forward(&s, &g, v[0])?;
                let c = ppnp.forward(&s, &g, v[0])?;
                fusion.forward(&s, a, b)?.add(c)?.mul(tape.constant(wt.clone()))?.sum_all()
            },
            &[h.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
        let r = check_params(
            &store,
            |s| {
                let x = s.constant(h.clone());
                let a = gcn.forward(s, &g, x)?;
                let b = gat.forward(s, &g, x)?;
                let c = ppnp.forward(s, &g, x)?;
                fusion.forward(s, a, b)?.add(c)?.mul(s.constant(wt.clone()))?.sum_all()
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}
