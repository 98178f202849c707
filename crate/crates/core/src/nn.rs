//! Named parameter storage, per-step binding onto a tape, and the small
//! layers shared by every branch (linear, layer norm, batch norm, dropout).

use std::cell::RefCell;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{rel_err, CheckReport};
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};

const BUFFER_PREFIX: &str = "buffer/";

/// Trainable parameters and non-trainable buffers, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::DuplicateEntry {
                kind: "parameter",
                name,
            });
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::DuplicateEntry { kind: "buffer", name });
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| unknown("parameter", name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| unknown("parameter", name))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| unknown("buffer", name))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.buffers.get_mut(name).ok_or_else(|| unknown("buffer", name))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_buffer",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.buffers.iter().map(|(k, v)| (format!("{}{}", BUFFER_PREFIX, k), v)))
            .collect();
        save_checkpoint(path, names.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    /// Overwrites values from a checkpoint; every stored entry must match an
    /// existing one by name and shape, and every existing entry must be present.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = load_checkpoint(path)?;
        let expected = self.params.len() + self.buffers.len();
        if records.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                records.len(),
                expected
            )));
        }
        for (name, value) in records {
            let slot = match name.strip_prefix(BUFFER_PREFIX) {
                Some(b) => self.buffers.get_mut(b),
                None => self.params.get_mut(&name),
            }
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", name)))?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    name,
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

fn unknown(kind: &'static str, name: &str) -> Error {
    Error::UnknownEntry {
        kind,
        name: name.to_owned(),
    }
}

/// One forward pass: every parameter bound to a tape leaf, plus the mode
/// flags and side channels (dropout randomness, batch-norm statistics).
pub struct Session<'t> {
    tape: &'t Tape,
    vars: IndexMap<String, Var<'t>>,
    buffers: IndexMap<String, Tensor>,
    training: bool,
    rng: RefCell<Option<ChaCha8Rng>>,
    buffer_updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'t> Session<'t> {
    /// Evaluation mode: no dropout, running statistics.
    pub fn eval(tape: &'t Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, false, None)
    }

    /// Training mode with a seeded stream for dropout masks.
    pub fn train(tape: &'t Tape, store: &ParamStore, rng: ChaCha8Rng) -> Self {
        Self::bind(tape, store, true, Some(rng))
    }

    fn bind(tape: &'t Tape, store: &ParamStore, training: bool, rng: Option<ChaCha8Rng>) -> Self {
        let vars = store.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Self {
            tape,
            buffers: store.buffers.clone(),
            vars,
            training,
            rng: RefCell::new(rng),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn p(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| unknown("parameter", name))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| unknown("buffer", name))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", rate)));
        }
        let mut guard = self.rng.borrow_mut();
        let rng = guard
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("training session without a random stream".into()))?;
        let keep = 1.0 / (1.0 - rate);
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        x.mul(self.tape.constant(Tensor::new(shape, mask)?))
    }

    pub fn record_buffer(&self, name: &str, value: Tensor) {
        self.buffer_updates.borrow_mut().push((name.to_owned(), value));
    }

    /// Buffer values computed during this pass, in execution order.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

/// Uniform `±1/√fan_in` initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.weight", name), init_uniform(&[d_in, d_out], d_in, rng))?;
        if bias {
            store.add(format!("{}.bias", name), init_uniform(&[d_out], d_in, rng))?;
        }
        Ok(Self {
            name: name.to_owned(),
            d_in,
            d_out,
            bias,
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(s.p(&format!("{}.weight", self.name))?)?;
        if self.bias {
            y.add(s.p(&format!("{}.bias", self.name))?)
        } else {
            Ok(y)
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Per-position normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        store.add(format!("{}.gain", name), Tensor::ones(&[d]))?;
        store.add(format!("{}.shift", name), Tensor::zeros(&[d]))?;
        Ok(Self { name: name.to_owned(), d })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        let mu = x.mean(axis, true)?;
        let centered = x.sub(mu)?;
        let var = centered.square()?.mean(axis, true)?;
        let normed = centered.div(var.add_scalar(NORM_EPS)?.sqrt()?)?;
        normed
            .mul(s.p(&format!("{}.gain", self.name))?)?
            .add(s.p(&format!("{}.shift", self.name))?)
    }
}

/// Normalization over every axis but the last, with exponential running
/// statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub d: usize,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, momentum: f64) -> Result<Self> {
        store.add(format!("{}.gain", name), Tensor::ones(&[d]))?;
        store.add(format!("{}.shift", name), Tensor::zeros(&[d]))?;
        store.add_buffer(format!("{}.running_mean", name), Tensor::zeros(&[d]))?;
        store.add_buffer(format!("{}.running_var", name), Tensor::ones(&[d]))?;
        Ok(Self {
            name: name.to_owned(),
            d,
            momentum,
        })
    }

    /// `batch` is the number of samples in the minibatch; training with a
    /// single sample is refused since its batch variance is meaningless.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = *shape.last().expect("rank ≥ 1");
        let rows = x.value().numel() / d;
        let flat = x.reshape(&[rows, d])?;
        let (mean_name, var_name) = (format!("{}.running_mean", self.name), format!("{}.running_var", self.name));
        let normed = if s.training() {
            if batch < 2 {
                return Err(Error::BatchTooSmall);
            }
            let mu = flat.mean(0, true)?;
            let centered = flat.sub(mu)?;
            let var = centered.square()?.mean(0, true)?;
            let m = self.momentum;
            let blend = |old: &Tensor, new: &Tensor| {
                let data = old.data().iter().zip(new.data()).map(|(o, n)| m * o + (1.0 - m) * n).collect();
                Tensor::new(vec![d], data)
            };
            s.record_buffer(&mean_name, blend(s.buffer(&mean_name)?, &mu.value())?);
            s.record_buffer(&var_name, blend(s.buffer(&var_name)?, &var.value())?);
            centered.div(var.add_scalar(NORM_EPS)?.sqrt()?)?
        } else {
            let mu = s.constant(s.buffer(&mean_name)?.clone());
            let sd = s.buffer(&var_name)?.map(|v| (v + NORM_EPS).sqrt());
            flat.sub(mu)?.div(s.constant(sd))?
        };
        normed
            .mul(s.p(&format!("{}.gain", self.name))?)?
            .add(s.p(&format!("{}.shift", self.name))?)?
            .reshape(&shape)
    }
}

/// Finite-difference check of `f`'s gradient with respect to stored
/// parameters, evaluated in eval mode. At most `max_per_param` evenly spaced
/// elements of each tensor are probed.
pub fn check_params<F>(store: &ParamStore, f: F, h: f64, max_per_param: usize) -> Result<CheckReport>
where
    F: for<'t> Fn(&Session<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::with_sign_log();
    let session = Session::eval(&tape, store);
    let grads = tape.backward(f(&session)?)?;
    let base_signs = tape.sign_log();
    let analytic: Vec<Tensor> = session.vars().map(|(_, v)| grads.wrt(v)).collect();
    let eval = |st: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let tape = Tape::with_sign_log();
        let s = Session::eval(&tape, st);
        let v = f(&s)?.value().item();
        Ok((v, tape.sign_log()))
    };
    let mut report = CheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        kink_skips: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.params().map(|(k, _)| k.to_owned()).collect();
    for (which, name) in names.iter().enumerate() {
        let n = store.get(name)?.numel();
        let count = n.min(max_per_param);
        for c in 0..count {
            // walk forward from the nominal element past any probe whose
            // stencil changes an activation pattern
            let mut found = None;
            for off in 0..n {
                let idx = (c * n / count + off) % n;
                let orig = probe.get(name)?.data()[idx];
                probe.get_mut(name)?.data_mut()[idx] = orig + h;
                let (plus, sp) = eval(&probe)?;
                probe.get_mut(name)?.data_mut()[idx] = orig - h;
                let (minus, sm) = eval(&probe)?;
                probe.get_mut(name)?.data_mut()[idx] = orig;
                if sp == base_signs && sm == base_signs {
                    found = Some((idx, (plus - minus) / (2.0 * h)));
                    break;
                }
                report.kink_skips += 1;
            }
            let Some((idx, numeric)) = found else { continue };
            let a = analytic[which].data()[idx];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;

    #[test]
    fn store_rejects_duplicates_and_unknowns() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::ones(&[2])).unwrap();
        assert!(matches!(s.add("a", Tensor::ones(&[2])), Err(Error::DuplicateEntry { .. })));
        assert!(matches!(s.get("b"), Err(Error::UnknownEntry { .. })));
        assert_eq!(s.num_scalars(), 2);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        Linear::new(&mut s, "l", 3, 2, true, &mut rng).unwrap();
        BatchNorm::new(&mut s, "bn", 2, 0.9).unwrap();
        s.set_buffer("bn.running_mean", Tensor::vector(vec![0.25, -1.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        s.save(&p).unwrap();

        let mut t = ParamStore::new();
        Linear::new(&mut t, "l", 3, 2, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        BatchNorm::new(&mut t, "bn", 2, 0.9).unwrap();
        t.load(&p).unwrap();
        assert_eq!(s, t);

        let mut wrong = ParamStore::new();
        Linear::new(&mut wrong, "l", 3, 3, true, &mut rng).unwrap();
        BatchNorm::new(&mut wrong, "bn", 2, 0.9).unwrap();
        assert!(wrong.load(&p).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let x = tape.constant(Tensor::uniform(&[3, 5], 4.0, &mut rng));
        let y = ln.forward(&s, x).unwrap().value();
        for row in y.data().chunks(5) {
            let m = row.iter().sum::<f64>() / 5.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let r = gradcheck::check(
            |_, v| {
                let mu = v[0].mean(1, true)?;
                let c = v[0].sub(mu)?;
                let var = c.square()?.mean(1, true)?;
                c.div(var.add_scalar(NORM_EPS)?.sqrt()?)?.mul(v[1])?.sum_all()
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn batch_norm_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, 0.9).unwrap();
        let x = Tensor::uniform(&[2, 5, 3], 2.0, &mut rng);

        let tape = Tape::new();
        let s = Session::train(&tape, &store, ChaCha8Rng::seed_from_u64(0));
        let y = bn.forward(&s, tape.constant(x.clone()), 2).unwrap().value();
        for c in 0..3 {
            let col: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
            assert!((col.iter().sum::<f64>() / 10.0).abs() < 1e-12);
        }
        let updates = s.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        let col0: Vec<f64> = x.data().iter().step_by(3).copied().collect();
        let mean0 = col0.iter().sum::<f64>() / 10.0;
        assert!((updates[0].1.data()[0] - 0.1 * mean0).abs() < 1e-12);

        let tape = Tape::new();
        let s = Session::train(&tape, &store, ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            bn.forward(&s, tape.constant(Tensor::ones(&[1, 5, 3])), 1),
            Err(Error::BatchTooSmall)
        ));

        // eval with fresh buffers is the identity (mean 0, var 1, up to eps)
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = bn.forward(&s, tape.constant(x.clone()), 2).unwrap().value();
        assert!(y.max_abs_diff(&x.map(|v| v / (1.0 + NORM_EPS).sqrt())) < 1e-12);
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let store = ParamStore::new();
        let x = Tensor::ones(&[1000]);
        let run = |seed| {
            let tape = Tape::new();
            let s = Session::train(&tape, &store, ChaCha8Rng::seed_from_u64(seed));
            s.dropout(tape.constant(x.clone()), 0.25).unwrap().value().as_ref().clone()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros));

        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        assert_eq!(*s.dropout(tape.constant(x.clone()), 0.25).unwrap().value(), x);
    }
}
