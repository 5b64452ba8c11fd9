//! Flow on 2-D points: a stack of coupling blocks with alternating
//! one-coordinate masks.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prior::Prior;
use super::rgflow::load_store;
use super::FlowModel;
use crate::coupling::{BijectorStack, CouplingMask, NetSize};
use crate::error::{Error, Result};
use crate::nn::{Binding, Checkpoint, ParamStore, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatFlowConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_res: usize,
    pub prior: Prior,
}

impl Default for FlatFlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            hidden: 64,
            n_res: 2,
            prior: Prior::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlatFlow2d<T> {
    pub config: FlatFlowConfig,
    pub store: ParamStore<T>,
    pub stack: BijectorStack,
}

const CKPT_KIND: &str = "flat2d";

impl<T: Real> FlatFlow2d<T> {
    pub fn new(config: FlatFlowConfig, seed: u64) -> Result<Self> {
        if config.n_blocks == 0 || config.hidden == 0 || config.n_res == 0 {
            return Err(Error::InvalidArgument("flat flow needs n_blocks, hidden, n_res >= 1".into()));
        }
        config.prior.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let size = NetSize { hidden: config.hidden, n_res: config.n_res };
        let stack = BijectorStack::new(
            &mut store,
            "flat",
            config.n_blocks,
            |p| CouplingMask::alternating(2, p),
            size,
            0,
            &mut rng,
        );
        Ok(Self { config, store, stack })
    }

    pub fn randomize(&mut self, seed: u64, gain: f64) {
        self.stack.randomize(&mut self.store, &mut ChaCha8Rng::seed_from_u64(seed), gain);
    }

    fn check(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != 2 {
            return Err(Error::shape("2 columns", format!("{}", x.ncols())));
        }
        Ok(())
    }

    /// Data to latent with `log |det|`.
    pub fn encode(&self, x: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check(x)?;
        self.stack.forward_array(&self.store, x)
    }

    pub fn decode(&self, z: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check(z)?;
        self.stack.inverse_array(&self.store, z)
    }

    pub fn log_prob(&self, x: &Array2<T>) -> Result<Array1<T>> {
        self.check(x)?;
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, &self.store);
        let lp = self.log_prob_var(&b, &tape.constant(x.clone()))?;
        Ok(lp.into_value().remove_axis(Axis(1)))
    }

    pub fn sample(&self, n: usize, t: f64, seed: u64) -> Result<Array2<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.config.prior.sample_array(&mut rng, n, 2, t);
        Ok(self.decode(&z)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": CKPT_KIND, "model": self.config }));
        for (name, value) in self.store.names().iter().zip(self.store.values()) {
            ck.push(name.clone(), value);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CKPT_KIND) {
            return Err(Error::Checkpoint("not a 2-D flow checkpoint".into()));
        }
        let config: FlatFlowConfig = serde_json::from_value(ck.meta["model"].clone())?;
        let mut model = Self::new(config, 0)?;
        load_store(&mut model.store, ck)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Real> FlowModel<T> for FlatFlow2d<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_prob_var(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (z, logdet) = self.stack.forward(b, x)?;
        let lp = self.config.prior.log_prob_var(b.tape(), &z);
        Ok(b.tape().add(&lp, &logdet))
    }

    fn to_checkpoint(&self) -> Checkpoint {
        FlatFlow2d::to_checkpoint(self)
    }

    fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        load_store(&mut self.store, ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_init_scores_the_prior() {
        let flow = FlatFlow2d::<f64>::new(FlatFlowConfig::default(), 1).unwrap();
        let x = ndarray::array![[0.3, -1.2], [2.0, 0.0]];
        let lp = flow.log_prob(&x).unwrap();
        for (r, row) in x.outer_iter().enumerate() {
            let want: f64 = row.iter().map(|&v| flow.config.prior.log_density(v)).sum();
            assert!((lp[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let mut flow = FlatFlow2d::<f64>::new(FlatFlowConfig::default(), 1).unwrap();
        flow.randomize(3, 0.1);
        let x = Array2::from_shape_fn((50, 2), |(i, j)| ((i * 2 + j) as f64 * 0.71).sin() * 3.0);
        let (z, ld) = flow.encode(&x).unwrap();
        assert!((&z - &x).iter().any(|d| d.abs() > 1e-3));
        let (back, ld_inv) = flow.decode(&z).unwrap();
        assert!((&back - &x).iter().all(|d| d.abs() < 1e-10));
        assert!((&ld + &ld_inv).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut flow = FlatFlow2d::<f32>::new(FlatFlowConfig::default(), 1).unwrap();
        flow.randomize(3, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        flow.save(&path).unwrap();
        let back = FlatFlow2d::<f32>::load(&path).unwrap();
        assert_eq!(back.store.values(), flow.store.values());
    }
}
