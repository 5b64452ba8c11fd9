//! Dense layers with weight normalization, SiLU residual blocks and the
//! residual networks used as scale and translation functions.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Binding, ParamId, ParamStore};
use super::scalar::Real;
use super::tape::Var;
use crate::error::{Error, Result};

/// `x · sigmoid(x)`
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).fast_exp())
}

/// Linear layer with a weight-normalized matrix: `W = g ⊙ V / ‖V‖_row`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub direction: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// How a freshly created layer's gain is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GainInit {
    /// Effective weight equals the raw Kaiming draw.
    Kaiming,
    /// Effective weight is zero (output layer of an identity-initialized flow).
    Zero,
}

impl DenseLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: usize,
        gain: GainInit,
        rng: &mut R,
    ) -> Self {
        let direction = store.add(format!("{name}.v"), Array2::zeros((fan_out, fan_in)), group);
        let gain_id = store.add(format!("{name}.g"), Array2::zeros((fan_out, 1)), group);
        let bias = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)), group);
        let layer = Self {
            direction,
            gain: gain_id,
            bias,
            fan_in,
            fan_out,
        };
        kaiming_init(store, &layer, rng);
        if gain == GainInit::Zero {
            store.get_mut(layer.gain).fill(T::zero());
        }
        layer
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().1 != self.fan_in {
            return Err(Error::shape(
                format!("{} input features", self.fan_in),
                format!("{}", x.shape().1),
            ));
        }
        let tape = b.tape();
        let w = b.weight_norm(self.direction, self.gain);
        Ok(tape.add_row(&tape.matmul_t(x, &w), &b.param(self.bias)))
    }

    /// Effective weight matrix `out x in`.
    pub fn effective_weight<T: Real>(&self, store: &ParamStore<T>) -> Array2<T> {
        let v = store.get(self.direction);
        let g = store.get(self.gain);
        let mut w = v.clone();
        for (i, mut row) in w.outer_iter_mut().enumerate() {
            let n = row.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            let f = g[[i, 0]] / n;
            row.mapv_inplace(|x| x * f);
        }
        w
    }
}

/// Kaiming-normal draw (variance `2 / fan_in`) for the direction matrix,
/// gain equal to each row's norm and zero bias.
pub fn kaiming_init<T: Real, R: Rng>(store: &mut ParamStore<T>, layer: &DenseLayer, rng: &mut R) {
    let std = (2.0 / layer.fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let v = Array2::from_shape_simple_fn((layer.fan_out, layer.fan_in), || T::of(normal.sample(rng)));
    let g = Array2::from_shape_fn((layer.fan_out, 1), |(i, _)| {
        v.row(i).iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
    });
    *store.get_mut(layer.direction) = v;
    *store.get_mut(layer.gain) = g;
    store.get_mut(layer.bias).fill(T::zero());
}

/// Three dense layers with SiLU between them and a skip connection.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub layers: [DenseLayer; 3],
}

impl ResidualBlock {
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = b.tape();
        let h = tape.silu(&self.layers[0].forward(b, x)?);
        let h = tape.silu(&self.layers[1].forward(b, &h)?);
        let h = self.layers[2].forward(b, &h)?;
        Ok(tape.add(x, &h))
    }
}

/// `n_res` residual blocks followed by a projection to the output size.
#[derive(Clone, Debug)]
pub struct ResNet {
    pub blocks: Vec<ResidualBlock>,
    pub projection: DenseLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNetShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub n_res: usize,
}

impl ResNet {
    /// Builds a network whose projection starts at zero, so the network
    /// initially outputs the zero vector.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: ResNetShape,
        group: usize,
        rng: &mut R,
    ) -> Self {
        assert!(shape.n_res >= 1, "a residual network needs at least one block");
        let blocks = (0..shape.n_res)
            .map(|k| {
                let dims = [(shape.input, shape.hidden), (shape.hidden, shape.hidden), (shape.hidden, shape.input)];
                let layers = std::array::from_fn(|i| {
                    let (fi, fo) = dims[i];
                    DenseLayer::new(store, &format!("{name}.res{k}.l{i}"), fi, fo, group, GainInit::Kaiming, rng)
                });
                ResidualBlock { layers }
            })
            .collect();
        let projection = DenseLayer::new(
            store,
            &format!("{name}.proj"),
            shape.input,
            shape.output,
            group,
            GainInit::Zero,
            rng,
        );
        Self { blocks, projection }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.projection.fan_out
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().1 != self.input_dim() {
            return Err(Error::shape(
                format!("{} input features", self.input_dim()),
                format!("{}", x.shape().1),
            ));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(b, &h)?;
        }
        self.projection.forward(b, &h)
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(std::iter::once(&self.projection))
    }
}
