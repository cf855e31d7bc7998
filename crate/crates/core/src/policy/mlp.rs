//! Small dense networks for the PPO policy and value functions: two tanh
//! hidden layers and a linear output, with manual backprop and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Dense layer, `out x in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn glorot(out: usize, input: usize, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (out + input) as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((out, input), |_| rng.gen_range(-s..s)),
            b: Array1::zeros(out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }
}

/// Two tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub h1: Dense,
    pub h2: Dense,
    pub out: Dense,
}

/// Activations cached for one batched forward pass.
pub struct MlpCache {
    input: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub h1: Dense,
    pub h2: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            h1: Dense::glorot(hidden, input, rng),
            h2: Dense::glorot(hidden, hidden, rng),
            out: Dense::glorot(out, hidden, rng),
        }
    }

    /// Batched forward: rows of `x` are samples.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let a1 = self.h1.forward(x).mapv(f64::tanh);
        let a2 = self.h2.forward(&a1).mapv(f64::tanh);
        let y = self.out.forward(&a2);
        (
            y,
            MlpCache {
                input: x.clone(),
                a1,
                a2,
            },
        )
    }

    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        let batch = x.clone().insert_axis(Axis(0));
        let (y, _) = self.forward(&batch);
        y.row(0).to_owned()
    }

    /// Backprop `d_out` (same shape as the forward output) to parameter
    /// gradients.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> MlpGrads {
        let d_w_out = d_out.t().dot(&cache.a2);
        let d_b_out = d_out.sum_axis(Axis(0));
        let mut d_a2 = d_out.dot(&self.out.w);
        d_a2.zip_mut_with(&cache.a2, |g, &h| *g *= 1.0 - h * h);
        let d_w2 = d_a2.t().dot(&cache.a1);
        let d_b2 = d_a2.sum_axis(Axis(0));
        let mut d_a1 = d_a2.dot(&self.h2.w);
        d_a1.zip_mut_with(&cache.a1, |g, &h| *g *= 1.0 - h * h);
        let d_w1 = d_a1.t().dot(&cache.input);
        let d_b1 = d_a1.sum_axis(Axis(0));
        MlpGrads {
            h1: Dense { w: d_w1, b: d_b1 },
            h2: Dense { w: d_w2, b: d_b2 },
            out: Dense {
                w: d_w_out,
                b: d_b_out,
            },
        }
    }

    fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.h1, &mut self.h2, &mut self.out]
    }
}

impl MlpGrads {
    fn layers(&self) -> [&Dense; 3] {
        [&self.h1, &self.h2, &self.out]
    }
}

pub struct MlpAdam {
    m: MlpGrads,
    v: MlpGrads,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl MlpAdam {
    pub fn new(mlp: &Mlp) -> Self {
        let zeros = MlpGrads {
            h1: mlp.h1.zeros_like(),
            h2: mlp.h2.zeros_like(),
            out: mlp.out.zeros_like(),
        };
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in mlp
            .layers_mut()
            .into_iter()
            .zip(grads.layers())
            .zip([&mut self.m.h1, &mut self.m.h2, &mut self.m.out].into_iter().zip([
                &mut self.v.h1,
                &mut self.v.h2,
                &mut self.v.out,
            ]))
        {
            for ((p, &g), (ms, vs)) in param
                .w
                .iter_mut()
                .zip(grad.w.iter())
                .zip(m.w.iter_mut().zip(v.w.iter_mut()))
            {
                *ms = self.beta1 * *ms + (1.0 - self.beta1) * g;
                *vs = self.beta2 * *vs + (1.0 - self.beta2) * g * g;
                *p -= lr * (*ms / bc1) / ((*vs / bc2).sqrt() + self.eps);
            }
            for ((p, &g), (ms, vs)) in param
                .b
                .iter_mut()
                .zip(grad.b.iter())
                .zip(m.b.iter_mut().zip(v.b.iter_mut()))
            {
                *ms = self.beta1 * *ms + (1.0 - self.beta1) * g;
                *vs = self.beta2 * *vs + (1.0 - self.beta2) * g * g;
                *p -= lr * (*ms / bc1) / ((*vs / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Numerically stable softmax over a logits row.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}


// ------------------------------------------------------------ serialization

#[derive(serde::Serialize, serde::Deserialize)]
struct MlpHeader {
    shapes: Vec<(usize, usize)>,
}

/// Write an MLP as a JSON header (layer shapes) plus flat little-endian
/// f64 parameters, same framing as the point-regressor format.
pub fn write_mlp(mlp: &Mlp, path: &std::path::Path) -> Result<(), crate::net::NetError> {
    use std::io::Write;
    let layers = [&mlp.h1, &mlp.h2, &mlp.out];
    let header = MlpHeader {
        shapes: layers.iter().map(|l| l.w.dim()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for layer in layers {
        for &v in layer.w.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read an MLP written by [`write_mlp`].
pub fn read_mlp(path: &std::path::Path) -> Result<Mlp, crate::net::NetError> {
    use crate::net::NetError;
    use std::io::Read;
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: MlpHeader = serde_json::from_slice(&header_bytes)?;
    if header.shapes.len() != 3 {
        return Err(NetError::Malformed(format!(
            "expected 3 layers, header lists {}",
            header.shapes.len()
        )));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut offset = 0usize;
    let mut next = |count: usize| -> Result<Vec<f64>, NetError> {
        let bytes = count * 8;
        if offset + bytes > rest.len() {
            return Err(NetError::Malformed("parameter block too short".into()));
        }
        let vals = rest[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += bytes;
        Ok(vals)
    };
    let mut layers = Vec::with_capacity(3);
    for &(rows, cols) in &header.shapes {
        let w = Array2::from_shape_vec((rows, cols), next(rows * cols)?)
            .map_err(|e| NetError::Malformed(e.to_string()))?;
        let b = Array1::from_vec(next(rows)?);
        layers.push(Dense { w, b });
    }
    if offset != rest.len() {
        return Err(NetError::Malformed("trailing bytes after parameters".into()));
    }
    let mut it = layers.into_iter();
    Ok(Mlp {
        h1: it.next().unwrap(),
        h2: it.next().unwrap(),
        out: it.next().unwrap(),
    })
}
