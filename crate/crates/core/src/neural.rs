//! Fully-connected networks for hidden-physics terms, with exact
//! reverse-mode gradients and a forward-over-reverse pass for input
//! Jacobians.
//!
//! Parameter layout: for each layer in order, the `n_out x n_in` weight
//! matrix row-major, then the `n_out` biases.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        "tanh"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    /// `log(1 + e^z)`; strictly positive outputs.
    Softplus,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutputHead::Linear),
            "softplus" => Ok(OutputHead::Softplus),
            other => Err(Error::Parse(format!("unknown output head `{other}`"))),
        }
    }

    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            OutputHead::Linear => z,
            OutputHead::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    fn d1(self, z: f64) -> f64 {
        match self {
            OutputHead::Linear => 1.0,
            OutputHead::Softplus => sigmoid(z),
        }
    }

    #[inline]
    fn d2(self, z: f64) -> f64 {
        match self {
            OutputHead::Linear => 0.0,
            OutputHead::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Scaled-uniform initialization: weights in `±sqrt(6 / (n_in + n_out))`,
/// biases zero.
pub fn init_params(layer_sizes: &[usize], _activation: Activation, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, 0x6e6e);
    let mut params = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        for _ in 0..n_in * n_out {
            params.push(rng.gen_range(-bound..=bound));
        }
        params.extend(std::iter::repeat(0.0).take(n_out));
    }
    params
}

/// `g(x; θ) = out_scale ⊙ head(W_L tanh(... tanh(W_1 x̃ + b_1) ...) + b_L)`
/// with standardized input `x̃ = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: OutputHead,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    output_scale: Vec<f64>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Forward intermediates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    z_out: Vec<f64>,
    pub output: Vec<f64>,
}

/// Forward intermediates of a Jacobian-vector product.
#[derive(Debug, Clone)]
pub struct JvpTrace {
    acts: Vec<Vec<f64>>,
    act_dots: Vec<Vec<f64>>,
    z_out: Vec<f64>,
    z_out_dot: Vec<f64>,
    pub output: Vec<f64>,
    pub output_dot: Vec<f64>,
}

impl Mlp {
    pub fn new(layer_sizes: Vec<usize>, head: OutputHead, params: Vec<f64>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("invalid layer sizes {layer_sizes:?}")));
        }
        if params.len() != param_count(&layer_sizes) {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layers {:?} need {}",
                params.len(),
                layer_sizes,
                param_count(&layer_sizes)
            )));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len());
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let n_in = layer_sizes[0];
        let n_out = *layer_sizes.last().unwrap();
        Ok(Self {
            layer_sizes,
            activation: Activation::Tanh,
            head,
            input_shift: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            output_scale: vec![1.0; n_out],
            params,
            offsets,
        })
    }

    pub fn initialized(layer_sizes: Vec<usize>, head: OutputHead, seed: u64) -> Result<Self> {
        let params = init_params(&layer_sizes, Activation::Tanh, seed);
        Self::new(layer_sizes, head, params)
    }

    pub fn with_input_scaling(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(Error::Shape("input scaling length mismatch".into()));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("input scales must be positive: {scale:?}")));
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(self)
    }

    pub fn with_output_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.output_dim() {
            return Err(Error::Shape("output scale length mismatch".into()));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("output scales must be positive: {scale:?}")));
        }
        self.output_scale = scale;
        Ok(self)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn head(&self) -> OutputHead {
        self.head
    }
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
    pub fn input_shift(&self) -> &[f64] {
        &self.input_shift
    }
    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }
    pub fn output_scale(&self) -> &[f64] {
        &self.output_scale
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let off = self.offsets[l];
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let n_layers = self.n_layers();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(self.standardize(x));
        let mut z_out = Vec::new();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let a = &acts[l];
            let n_in = a.len();
            let mut z: Vec<f64> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += dot(row, a);
            }
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
                acts.push(z);
            } else {
                z_out = z;
            }
        }
        let output = z_out
            .iter()
            .zip(&self.output_scale)
            .map(|(z, s)| s * self.head.value(*z))
            .collect();
        Ok(Trace { acts, z_out, output })
    }

    /// Accumulates `upstreamᵀ ∂g/∂θ` into `param_grad` and `upstreamᵀ ∂g/∂x`
    /// into `input_grad` (either may be skipped).
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let n_layers = self.n_layers();
        let mut delta: Vec<f64> = trace
            .z_out
            .iter()
            .zip(upstream.iter().zip(&self.output_scale))
            .map(|(z, (g, s))| g * s * self.head.d1(*z))
            .collect();
        let want_input = input_grad.is_some();
        for l in (0..n_layers).rev() {
            let (w, _) = self.layer(l);
            let a = &trace.acts[l];
            let n_in = a.len();
            if let Some(pg) = param_grad.as_deref_mut() {
                let off = self.offsets[l];
                let (gw, gb) = pg[off..off + n_in * delta.len() + delta.len()].split_at_mut(n_in * delta.len());
                for (o, d) in delta.iter().enumerate() {
                    if *d != 0.0 {
                        axpy(*d, a, &mut gw[o * n_in..(o + 1) * n_in]);
                    }
                    gb[o] += d;
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut abar = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    axpy(*d, &w[o * n_in..(o + 1) * n_in], &mut abar);
                }
            }
            if l == 0 {
                if let Some(xg) = input_grad {
                    for (i, v) in abar.iter().enumerate() {
                        xg[i] += v / self.input_scale[i];
                    }
                }
                break;
            }
            delta = abar.iter().zip(a).map(|(g, a)| g * (1.0 - a * a)).collect();
        }
    }

    /// Reverse-mode gradient of `upstreamᵀ g(x)`: `(∂/∂θ, ∂/∂x)`.
    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape("cotangent length mismatch".into()));
        }
        let trace = self.forward_trace(x)?;
        let mut pg = vec![0.0; self.num_params()];
        let mut xg = vec![0.0; self.input_dim()];
        self.backward(&trace, upstream, Some(&mut pg), Some(&mut xg));
        Ok((pg, xg))
    }

    /// Forward-mode directional derivative: `(g(x), ∂g/∂x · x_dot)`.
    pub fn jvp(&self, x: &[f64], x_dot: &[f64]) -> Result<JvpTrace> {
        self.check_input(x)?;
        self.check_input(x_dot)?;
        let n_layers = self.n_layers();
        let mut acts = Vec::with_capacity(n_layers);
        let mut act_dots = Vec::with_capacity(n_layers);
        acts.push(self.standardize(x));
        act_dots.push(x_dot.iter().zip(&self.input_scale).map(|(v, s)| v / s).collect::<Vec<_>>());
        let (mut z_out, mut z_out_dot) = (Vec::new(), Vec::new());
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let (a, ad) = (&acts[l], &act_dots[l]);
            let n_in = a.len();
            let mut z: Vec<f64> = b.to_vec();
            let mut zd = vec![0.0; z.len()];
            for o in 0..z.len() {
                let row = &w[o * n_in..(o + 1) * n_in];
                z[o] += dot(row, a);
                zd[o] = dot(row, ad);
            }
            if l + 1 < n_layers {
                for (v, vd) in z.iter_mut().zip(zd.iter_mut()) {
                    *v = v.tanh();
                    *vd *= 1.0 - *v * *v;
                }
                acts.push(z);
                act_dots.push(zd);
            } else {
                z_out = z;
                z_out_dot = zd;
            }
        }
        let output = z_out.iter().zip(&self.output_scale).map(|(z, s)| s * self.head.value(*z)).collect();
        let output_dot = z_out
            .iter()
            .zip(z_out_dot.iter().zip(&self.output_scale))
            .map(|(z, (zd, s))| s * self.head.d1(*z) * zd)
            .collect();
        Ok(JvpTrace { acts, act_dots, z_out, z_out_dot, output, output_dot })
    }

    /// Reverse pass through a [`Mlp::jvp`] evaluation: given cotangents for
    /// both the output and its directional derivative, accumulates parameter
    /// and input gradients.
    pub fn jvp_backward(
        &self,
        trace: &JvpTrace,
        out_bar: &[f64],
        out_dot_bar: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let n_layers = self.n_layers();
        let n_out = self.output_dim();
        let mut zbar = vec![0.0; n_out];
        let mut zdbar = vec![0.0; n_out];
        for o in 0..n_out {
            let (z, zd, s) = (trace.z_out[o], trace.z_out_dot[o], self.output_scale[o]);
            zbar[o] = s * (self.head.d1(z) * out_bar[o] + self.head.d2(z) * zd * out_dot_bar[o]);
            zdbar[o] = s * self.head.d1(z) * out_dot_bar[o];
        }
        for l in (0..n_layers).rev() {
            let (w, _) = self.layer(l);
            let (a, ad) = (&trace.acts[l], &trace.act_dots[l]);
            let n_in = a.len();
            if let Some(pg) = param_grad.as_deref_mut() {
                let off = self.offsets[l];
                let m = zbar.len();
                let (gw, gb) = pg[off..off + n_in * m + m].split_at_mut(n_in * m);
                for o in 0..m {
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    axpy(zbar[o], a, row);
                    axpy(zdbar[o], ad, row);
                    gb[o] += zbar[o];
                }
            }
            let mut abar = vec![0.0; n_in];
            let mut adbar = vec![0.0; n_in];
            for o in 0..zbar.len() {
                let row = &w[o * n_in..(o + 1) * n_in];
                axpy(zbar[o], row, &mut abar);
                axpy(zdbar[o], row, &mut adbar);
            }
            if l == 0 {
                if let Some(xg) = input_grad {
                    for i in 0..n_in {
                        xg[i] += abar[i] / self.input_scale[i];
                    }
                }
                break;
            }
            // a = tanh(z), ȧ = (1 - a²) ż
            let mut nz = vec![0.0; n_in];
            let mut nzd = vec![0.0; n_in];
            for i in 0..n_in {
                let d1 = 1.0 - a[i] * a[i];
                // tanh''(z) ż = -2 a (1 - a²) ż = -2 a ȧ
                nz[i] = d1 * abar[i] - 2.0 * a[i] * ad[i] * adbar[i];
                nzd[i] = d1 * adbar[i];
            }
            zbar = nz;
            zdbar = nzd;
        }
    }

    /// `∂g/∂x` as an `output_dim x input_dim` row-major matrix.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        let mut jac = vec![0.0; n_out * n_in];
        let mut e = vec![0.0; n_in];
        for j in 0..n_in {
            e.fill(0.0);
            e[j] = 1.0;
            let t = self.jvp(x, &e)?;
            for o in 0..n_out {
                jac[o * n_in + j] = t.output_dot[o];
            }
        }
        Ok(jac)
    }

    /// Writes the checkpoint format: `key=value` header lines closed by
    /// `end`, followed by the parameters as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, role: &str, mut w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        writeln!(w, "format=mlp-checkpoint-v1")?;
        writeln!(w, "role={role}")?;
        writeln!(
            w,
            "layers={}",
            self.layer_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        )?;
        writeln!(w, "activation={}", self.activation.name())?;
        writeln!(w, "head={}", self.head.name())?;
        writeln!(w, "input_shift={}", join(&self.input_shift))?;
        writeln!(w, "input_scale={}", join(&self.input_scale))?;
        writeln!(w, "output_scale={}", join(&self.output_scale))?;
        writeln!(w, "num_params={}", self.params.len())?;
        writeln!(w, "end")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, role: &str, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(role, &mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint; returns the network and its role tag.
    pub fn read_checkpoint<R: Read>(r: R) -> Result<(Self, String)> {
        let mut r = BufReader::new(r);
        let mut fields = std::collections::HashMap::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("checkpoint header not terminated".into()));
            }
            let line = line.trim_end();
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad checkpoint header line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Parse(format!("checkpoint missing `{k}`")));
        if get("format")? != "mlp-checkpoint-v1" {
            return Err(Error::Parse("unsupported checkpoint format".into()));
        }
        if get("activation")? != "tanh" {
            return Err(Error::Parse("unsupported activation".into()));
        }
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{k}: {e}"))))
                .collect()
        };
        let layers: Vec<usize> = get("layers")?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("layers: {e}"))))
            .collect::<Result<_>>()?;
        let n: usize = get("num_params")?.parse().map_err(|e| Error::Parse(format!("num_params: {e}")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let net = Mlp::new(layers, OutputHead::parse(get("head")?)?, params)?
            .with_input_scaling(floats("input_shift")?, floats("input_scale")?)?
            .with_output_scale(floats("output_scale")?)?;
        Ok((net, get("role")?.clone()))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
