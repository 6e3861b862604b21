//! Feed-forward and recurrent layers whose weights live in a [`ParamStore`].

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = NumError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(NumError::Domain(format!("unknown activation {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            bias: store.add_zeros(format!("{name}.b"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Multi-layer perceptron: `activation` and dropout after every hidden layer,
/// linear output.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl MlpParams {
    /// `sizes` lists every width from input to output (at least two entries).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!((0.0..1.0).contains(&dropout), "dropout rate must be in [0, 1)");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation,
            dropout,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_size() {
            return Err(NumError::Shape(format!(
                "MLP expects input width {}, got {cols}",
                self.input_size()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, store, h);
            if i < last {
                h = self.activation.apply(g, h);
                h = g.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }
}

/// One GRU layer with fused gate matrices, gate order (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_input: store.add_glorot(format!("{name}.wi"), input_size, 3 * hidden_size, rng),
            w_hidden: store.add_glorot(format!("{name}.wh"), hidden_size, 3 * hidden_size, rng),
            b_input: store.add_zeros(format!("{name}.bi"), &[3 * hidden_size]),
            b_hidden: store.add_zeros(format!("{name}.bh"), &[3 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    /// r = σ(x Wᵢᵣ + h Wₕᵣ + b), z = σ(x Wᵢ𝑧 + h Wₕ𝑧 + b),
    /// n = tanh(x Wᵢₙ + bᵢₙ + r ⊙ (h Wₕₙ + bₕₙ)), h' = (1 − z) ⊙ n + z ⊙ h.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let hs = self.hidden_size;
        let wi = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bi = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let xi = g.matmul(x, wi);
        let xi = g.add_row(xi, bi);
        let hh = g.matmul(h, wh);
        let hh = g.add_row(hh, bh);
        let xi_rz = g.slice_cols(xi, 0, 2 * hs);
        let hh_rz = g.slice_cols(hh, 0, 2 * hs);
        let rz = g.add(xi_rz, hh_rz);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hs);
        let z = g.slice_cols(rz, hs, hs);
        let xi_n = g.slice_cols(xi, 2 * hs, hs);
        let hh_n = g.slice_cols(hh, 2 * hs, hs);
        let gated = g.mul(r, hh_n);
        let n = g.add(xi_n, gated);
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub layers: Vec<GruCell>,
    pub dropout: f64,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|i| {
                let inp = if i == 0 { input_size } else { hidden_size };
                GruCell::new(store, &format!("{name}.l{i}"), inp, hidden_size, rng)
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size
    }

    /// Top-layer hidden states `h_1..h_M`. Every layer starts from `h0`
    /// (zeros when `None`). An empty input gives an empty output.
    pub fn sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        h0: Option<Var>,
    ) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let batch = g.value(first).rows();
        check_inputs(g, inputs, self.input_size())?;
        let h_init = init_state(g, h0, batch, self.hidden_size())?;
        let mut seq = inputs.to_vec();
        for (li, cell) in self.layers.iter().enumerate() {
            if li > 0 {
                seq = seq.into_iter().map(|v| g.dropout(v, self.dropout)).collect();
            }
            let mut h = h_init;
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                h = cell.step(g, store, x, h);
                out.push(h);
            }
            seq = out;
        }
        Ok(seq)
    }
}

/// One LSTM layer with fused gates, order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_input: store.add_glorot(format!("{name}.wi"), input_size, 4 * hidden_size, rng),
            w_hidden: store.add_glorot(format!("{name}.wh"), hidden_size, 4 * hidden_size, rng),
            bias: store.add_zeros(format!("{name}.b"), &[4 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    /// Returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hs = self.hidden_size;
        let wi = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let b = g.param(store, self.bias);
        let xi = g.matmul(x, wi);
        let hh = g.matmul(h, wh);
        let pre = g.add(xi, hh);
        let pre = g.add_row(pre, b);
        let i_gate = g.slice_cols(pre, 0, hs);
        let i_gate = g.sigmoid(i_gate);
        let f_gate = g.slice_cols(pre, hs, hs);
        let f_gate = g.sigmoid(f_gate);
        let cand = g.slice_cols(pre, 2 * hs, hs);
        let cand = g.tanh(cand);
        let o_gate = g.slice_cols(pre, 3 * hs, hs);
        let o_gate = g.sigmoid(o_gate);
        let keep = g.mul(f_gate, c);
        let write = g.mul(i_gate, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o_gate, squashed);
        (h_next, c_next)
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub layers: Vec<LstmCell>,
    pub dropout: f64,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|i| {
                let inp = if i == 0 { input_size } else { hidden_size };
                LstmCell::new(store, &format!("{name}.l{i}"), inp, hidden_size, rng)
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size
    }

    /// Top-layer hidden states; cell states start at zero.
    pub fn sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        h0: Option<Var>,
    ) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let batch = g.value(first).rows();
        check_inputs(g, inputs, self.input_size())?;
        let h_init = init_state(g, h0, batch, self.hidden_size())?;
        let c_init = g.constant(Tensor::zeros(&[batch, self.hidden_size()]));
        let mut seq = inputs.to_vec();
        for (li, cell) in self.layers.iter().enumerate() {
            if li > 0 {
                seq = seq.into_iter().map(|v| g.dropout(v, self.dropout)).collect();
            }
            let (mut h, mut c) = (h_init, c_init);
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                (h, c) = cell.step(g, store, x, h, c);
                out.push(h);
            }
            seq = out;
        }
        Ok(seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = NumError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(NumError::Domain(format!("unknown recurrent cell {other}"))),
        }
    }
}

/// A stacked recurrence of either cell kind.
#[derive(Clone, Debug)]
pub enum Recurrent {
    Gru(GruParams),
    Lstm(LstmParams),
}

impl Recurrent {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: CellKind,
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        match kind {
            CellKind::Gru => Recurrent::Gru(GruParams::new(
                store, name, input_size, hidden_size, num_layers, dropout, rng,
            )),
            CellKind::Lstm => Recurrent::Lstm(LstmParams::new(
                store, name, input_size, hidden_size, num_layers, dropout, rng,
            )),
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            Recurrent::Gru(p) => p.hidden_size(),
            Recurrent::Lstm(p) => p.hidden_size(),
        }
    }

    pub fn sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        h0: Option<Var>,
    ) -> Result<Vec<Var>> {
        match self {
            Recurrent::Gru(p) => p.sequence(g, store, inputs, h0),
            Recurrent::Lstm(p) => p.sequence(g, store, inputs, h0),
        }
    }
}

fn check_inputs(g: &Graph, inputs: &[Var], width: usize) -> Result<()> {
    let rows = g.value(inputs[0]).rows();
    for &x in inputs {
        let t = g.value(x);
        if t.cols() != width || t.rows() != rows {
            return Err(NumError::Shape(format!(
                "recurrent input {:?}, expected {rows}x{width}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn init_state(g: &mut Graph, h0: Option<Var>, batch: usize, hidden: usize) -> Result<Var> {
    match h0 {
        Some(h) => {
            let t = g.value(h);
            if t.cols() != hidden || t.rows() != batch {
                return Err(NumError::Shape(format!(
                    "initial state {:?}, expected {batch}x{hidden}",
                    t.shape()
                )));
            }
            Ok(h)
        }
        None => Ok(g.constant(Tensor::zeros(&[batch, hidden]))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::new(&mut store, "m", &[2, 2], Activation::Relu, 0.0, &mut rng);
        store.set(mlp.layers[0].weight, Tensor::identity(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0]));
        let y = mlp.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::new(&mut store, "m", &[3, 4, 2], Activation::Tanh, 0.0, &mut rng);
        store.zero_all();
        store
            .set(mlp.layers[1].bias, Tensor::vector(&[0.25, -1.5]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[5.0, -3.0, 2.0]));
        let y = mlp.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5]);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::new(&mut store, "m", &[3, 2], Activation::Relu, 0.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(mlp.apply(&mut g, &store, x), Err(NumError::Shape(_))));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = MlpParams::new(&mut store, "m", &[2, 3, 1], Activation::Tanh, 0.0, &mut rng);
        let x = store.add("x", Tensor::vector(&[0.3, -0.8]));
        for id in mlp.param_ids() {
            let t = Tensor::standard_normal(store.get(id).shape(), &mut rng);
            store.set(id, t).unwrap();
        }
        let report = grad_check_params(
            |g, s| {
                let xv = g.param(s, x);
                let y = mlp.apply(g, s, xv).unwrap();
                g.sum(y)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gru_zero_weights_and_zero_state_stay_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = GruParams::new(&mut store, "g", 2, 3, 1, 0.0, &mut rng);
        store.zero_all();
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..4)
            .map(|i| g.constant(Tensor::vector(&[i as f64, -1.0])))
            .collect();
        let hs = gru.sequence(&mut g, &store, &xs, None).unwrap();
        assert_eq!(hs.len(), 4);
        for h in hs {
            assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        }
        // with a nonzero start state every step halves it: z = 0.5, n = 0
        let h0 = g.constant(Tensor::vector(&[1.0, -2.0, 4.0]));
        let hs = gru.sequence(&mut g, &store, &xs[..2], Some(h0)).unwrap();
        assert_eq!(g.value(hs[1]).data(), &[0.25, -0.5, 1.0]);
    }

    #[test]
    fn gru_single_step_and_empty_sequence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gru = GruParams::new(&mut store, "g", 2, 3, 1, 0.0, &mut rng);
        let mut g = Graph::new();
        assert!(gru.sequence(&mut g, &store, &[], None).unwrap().is_empty());
        let x = g.constant(Tensor::vector(&[0.4, 0.9]));
        let seq = gru.sequence(&mut g, &store, &[x], None).unwrap();
        let h0 = g.constant(Tensor::zeros(&[1, 3]));
        let step = gru.layers[0].step(&mut g, &store, x, h0);
        assert_eq!(g.value(seq[0]).data(), g.value(step).data());
    }

    #[test]
    fn gru_sequence_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gru = GruParams::new(&mut store, "g", 2, 3, 2, 0.0, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = Tensor::uniform(store.get(id).shape(), 0.8, &mut rng);
            store.set(id, t).unwrap();
        }
        let inputs: Vec<_> = (0..3)
            .map(|i| store.add(format!("x{i}"), Tensor::uniform(&[2], 1.0, &mut rng)))
            .collect();
        let readout = store.add("v", Tensor::uniform(&[3, 1], 1.0, &mut rng));
        let report = grad_check_params(
            |g, s| {
                let xs: Vec<Var> = inputs.iter().map(|&i| g.param(s, i)).collect();
                let hs = gru.sequence(g, s, &xs, None).unwrap();
                let v = g.param(s, readout);
                let y = g.matmul(*hs.last().unwrap(), v);
                g.sum(y)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn lstm_sequence_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = Recurrent::new(CellKind::Lstm, &mut store, "l", 3, 2, 2, 0.0, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = Tensor::uniform(store.get(id).shape(), 0.8, &mut rng);
            store.set(id, t).unwrap();
        }
        let inputs: Vec<_> = (0..3)
            .map(|i| store.add(format!("x{i}"), Tensor::uniform(&[2, 3], 1.0, &mut rng)))
            .collect();
        let report = grad_check_params(
            |g, s| {
                let xs: Vec<Var> = inputs.iter().map(|&i| g.param(s, i)).collect();
                let hs = rec.sequence(g, s, &xs, None).unwrap();
                let sq = g.square(hs[2]);
                g.sum(sq)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(rec.hidden_size(), 2);
    }

    #[test]
    fn recurrent_rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = Recurrent::new(CellKind::Gru, &mut store, "g", 3, 2, 1, 0.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(rec.sequence(&mut g, &store, &[x], None).is_err());
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let h0 = g.constant(Tensor::vector(&[1.0]));
        assert!(rec.sequence(&mut g, &store, &[x], Some(h0)).is_err());
    }
}
