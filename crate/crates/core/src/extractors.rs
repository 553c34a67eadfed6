//! Soft concept extractors.
//!
//! An extractor maps one modality's feature slice to `concepts` probabilities
//! through a stack of dense layers: `tanh` on hidden layers, the logistic
//! sigmoid on the output. `LinearSigmoid` is the stack with no hidden layer.
//!
//! Besides the usual value backward pass, extractors expose input-gradient
//! attributions (`d p_j / d x`) and a backward pass through those
//! attributions, which is what the TANGOS penalty needs.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard for cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub name: String,
    /// Input features of the modality.
    pub dim: usize,
    /// Concepts extracted from the modality.
    pub concepts: usize,
}

impl ModalitySchema {
    pub fn new(name: impl Into<String>, dim: usize, concepts: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            concepts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    LinearSigmoid,
    Mlp {
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub kind: ExtractorKind,
    pub schema: ModalitySchema,
    pub params: Vec<f64>,
}

/// Input-gradient attributions of one sample, `concepts x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub concepts: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Attribution {
    pub fn zeros(concepts: usize, dim: usize) -> Self {
        Self {
            concepts,
            dim,
            values: vec![0.0; concepts * dim],
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn get(&self, j: usize, f: usize) -> f64 {
        self.values[j * self.dim + f]
    }
}

struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the weight block in the flat parameter vector.
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

/// Activations of a forward pass; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Extractor {
    /// Zero-initialised extractor. Every output is 0.5.
    pub fn new(kind: ExtractorKind, schema: ModalitySchema) -> Result<Self> {
        if schema.dim == 0 || schema.concepts == 0 {
            return Err(Error::invalid(format!(
                "modality '{}' needs positive dim and concepts",
                schema.name
            )));
        }
        if let ExtractorKind::Mlp { hidden } = &kind {
            if hidden.contains(&0) {
                return Err(Error::invalid("hidden layer sizes must be positive"));
            }
        }
        let mut e = Self {
            kind,
            schema,
            params: Vec::new(),
        };
        e.params = vec![0.0; e.param_count()];
        Ok(e)
    }

    /// Extractor with parameters drawn uniformly from `[-0.1, 0.1]`.
    pub fn random(kind: ExtractorKind, schema: ModalitySchema, rng: &mut impl Rng) -> Result<Self> {
        let mut e = Self::new(kind, schema)?;
        for p in &mut e.params {
            *p = rng.random_range(-0.1..=0.1);
        }
        Ok(e)
    }

    pub fn with_params(kind: ExtractorKind, schema: ModalitySchema, params: Vec<f64>) -> Result<Self> {
        let mut e = Self::new(kind, schema)?;
        if params.len() != e.params.len() {
            return Err(Error::invalid(format!(
                "extractor '{}' expects {} parameters, got {}",
                e.schema.name,
                e.params.len(),
                params.len()
            )));
        }
        e.params = params;
        Ok(e)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.schema.dim];
        if let ExtractorKind::Mlp { hidden } = &self.kind {
            sizes.extend(hidden);
        }
        sizes.push(self.schema.concepts);
        sizes
    }

    fn layers(&self) -> Vec<Layer> {
        let sizes = self.sizes();
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let l = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn dim(&self) -> usize {
        self.schema.dim
    }

    pub fn concepts(&self) -> usize {
        self.schema.concepts
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.schema.dim {
            return Err(Error::invalid(format!(
                "modality '{}' expects {} features, got {}",
                self.schema.name,
                self.schema.dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let w = &self.params[layer.offset..layer.bias_offset()];
            let b = &self.params[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
            let out: Vec<f64> = (0..layer.fan_out)
                .map(|k| {
                    let row = &w[k * layer.fan_in..(k + 1) * layer.fan_in];
                    let z = b[k] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        sigmoid(z)
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Trace { acts }
    }

    /// Concept probabilities for one modality sample.
    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).acts.pop().unwrap_or_default())
    }

    /// Vector-Jacobian product of [`Self::extract`] with respect to the parameters.
    pub fn extract_backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if upstream.len() != self.schema.concepts {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.schema.concepts
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(x, upstream, None, &mut grad);
        Ok(grad)
    }

    /// Exact input gradients `d p_j / d x`.
    pub fn attributions(&self, x: &[f64]) -> Result<Attribution> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let jac = self.jacobians(&trace);
        let last = jac.into_iter().last().map(|(_, j)| j).unwrap_or_default();
        Ok(Attribution {
            concepts: self.schema.concepts,
            dim: self.schema.dim,
            values: last,
        })
    }

    /// Parameter gradient of `<upstream_out, p(x)> + <upstream_att, A(x)>`.
    ///
    /// Either term may be omitted; this differentiates through the
    /// attribution map, which makes it a second-order pass.
    pub fn attributions_backward(
        &self,
        x: &[f64],
        upstream_out: Option<&[f64]>,
        upstream_att: &Attribution,
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if upstream_att.concepts != self.schema.concepts || upstream_att.dim != self.schema.dim {
            return Err(Error::invalid("attribution gradient has the wrong shape"));
        }
        let zeros;
        let out = match upstream_out {
            Some(u) if u.len() == self.schema.concepts => u,
            Some(_) => return Err(Error::invalid("upstream gradient has the wrong length")),
            None => {
                zeros = vec![0.0; self.schema.concepts];
                &zeros
            }
        };
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(x, out, Some(upstream_att), &mut grad);
        Ok(grad)
    }

    /// Per layer: `(W_l J_{l-1}, J_l)`, each `fan_out x dim`, with `J_0 = I`.
    fn jacobians(&self, trace: &Trace) -> Vec<(Vec<f64>, Vec<f64>)> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let dim = self.schema.dim;
        let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let w = &self.params[layer.offset..layer.bias_offset()];
            let pre = if l == 0 {
                w.to_vec()
            } else {
                let prev = &out[l - 1].1;
                let mut g = vec![0.0; layer.fan_out * dim];
                for k in 0..layer.fan_out {
                    for h in 0..layer.fan_in {
                        let wkh = w[k * layer.fan_in + h];
                        if wkh == 0.0 {
                            continue;
                        }
                        let src = &prev[h * dim..(h + 1) * dim];
                        for (dst, s) in g[k * dim..(k + 1) * dim].iter_mut().zip(src) {
                            *dst += wkh * s;
                        }
                    }
                }
                g
            };
            let acts = &trace.acts[l + 1];
            let mut jac = pre.clone();
            for k in 0..layer.fan_out {
                let d = act_prime(acts[k], l == last);
                jac[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v *= d);
            }
            out.push((pre, jac));
        }
        out
    }

    fn backward_into(
        &self,
        x: &[f64],
        upstream_out: &[f64],
        upstream_att: Option<&Attribution>,
        grad: &mut [f64],
    ) {
        let layers = self.layers();
        let last = layers.len() - 1;
        let dim = self.schema.dim;
        let trace = self.trace(x);
        let jac = upstream_att.map(|_| self.jacobians(&trace));

        let mut act_bar = upstream_out.to_vec();
        let mut jac_bar: Option<Vec<f64>> = upstream_att.map(|a| a.values.clone());

        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let is_out = l == last;
            let acts = &trace.acts[l + 1];
            let input = &trace.acts[l];
            let w = &self.params[layer.offset..layer.bias_offset()];

            let mut z_bar: Vec<f64> = (0..layer.fan_out)
                .map(|k| act_bar[k] * act_prime(acts[k], is_out))
                .collect();

            // Through J_l = diag(act'(z_l)) G_l.
            let mut pre_bar: Option<Vec<f64>> = None;
            if let (Some(jb), Some(jac)) = (jac_bar.as_ref(), jac.as_ref()) {
                let pre = &jac[l].0;
                let mut gb = vec![0.0; layer.fan_out * dim];
                for k in 0..layer.fan_out {
                    let d = act_prime(acts[k], is_out);
                    let dd = act_second(acts[k], is_out);
                    let mut diag_bar = 0.0;
                    for c in 0..dim {
                        let jbv = jb[k * dim + c];
                        gb[k * dim + c] = d * jbv;
                        diag_bar += jbv * pre[k * dim + c];
                    }
                    z_bar[k] += diag_bar * dd;
                }
                pre_bar = Some(gb);
            }

            let (wg, rest) = grad[layer.offset..].split_at_mut(layer.fan_in * layer.fan_out);
            let bg = &mut rest[..layer.fan_out];
            for k in 0..layer.fan_out {
                bg[k] += z_bar[k];
                let row = &mut wg[k * layer.fan_in..(k + 1) * layer.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += z_bar[k] * a;
                }
            }

            // G_l = W_l J_{l-1}: W-gradient and J_{l-1}-gradient.
            let mut next_jac_bar = None;
            if let (Some(gb), Some(jac)) = (pre_bar.as_ref(), jac.as_ref()) {
                if l == 0 {
                    for (g, v) in wg.iter_mut().zip(gb) {
                        *g += v;
                    }
                } else {
                    let prev = &jac[l - 1].1;
                    let mut jb_prev = vec![0.0; layer.fan_in * dim];
                    for k in 0..layer.fan_out {
                        let gbk = &gb[k * dim..(k + 1) * dim];
                        for h in 0..layer.fan_in {
                            let src = &prev[h * dim..(h + 1) * dim];
                            wg[k * layer.fan_in + h] +=
                                gbk.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            let wkh = w[k * layer.fan_in + h];
                            for (dst, g) in jb_prev[h * dim..(h + 1) * dim].iter_mut().zip(gbk) {
                                *dst += wkh * g;
                            }
                        }
                    }
                    next_jac_bar = Some(jb_prev);
                }
            }

            if l > 0 {
                act_bar = (0..layer.fan_in)
                    .map(|h| {
                        (0..layer.fan_out)
                            .map(|k| w[k * layer.fan_in + h] * z_bar[k])
                            .sum()
                    })
                    .collect();
                jac_bar = next_jac_bar;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// First derivative of the activation, written in terms of its output.
#[inline]
fn act_prime(a: f64, sigmoid_out: bool) -> f64 {
    if sigmoid_out {
        a * (1.0 - a)
    } else {
        1.0 - a * a
    }
}

#[inline]
fn act_second(a: f64, sigmoid_out: bool) -> f64 {
    if sigmoid_out {
        a * (1.0 - a) * (1.0 - 2.0 * a)
    } else {
        -2.0 * a * (1.0 - a * a)
    }
}

/// How concept pairs enter the decorrelation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// `|cos|`: anti-correlated duplicates are penalised too.
    #[default]
    Absolute,
    /// Signed cosine.
    Signed,
}

#[derive(Debug, Clone)]
pub struct TangosPenalty {
    /// `lambda_sparsity * sparsity + lambda_correlation * correlation`.
    pub value: f64,
    pub sparsity: f64,
    pub correlation: f64,
    /// Gradient of `value` with respect to each input attribution.
    pub grads: Vec<Attribution>,
}

/// Sparsity and decorrelation penalty over one modality's attribution batch.
///
/// Sparsity is the batch mean of the per-concept mean L1 norm; correlation
/// is the batch mean of the mean cosine over the `C(concepts, 2)` pairs.
pub fn tangos_penalty(
    atts: &[Attribution],
    lambda_sparsity: f64,
    lambda_correlation: f64,
    mode: CorrelationMode,
) -> TangosPenalty {
    let mut grads: Vec<Attribution> = atts
        .iter()
        .map(|a| Attribution::zeros(a.concepts, a.dim))
        .collect();
    if atts.is_empty() {
        return TangosPenalty {
            value: 0.0,
            sparsity: 0.0,
            correlation: 0.0,
            grads,
        };
    }
    let n = atts.len() as f64;
    let mut sparsity = 0.0;
    let mut correlation = 0.0;

    for (att, grad) in atts.iter().zip(grads.iter_mut()) {
        let concepts = att.concepts;
        if concepts == 0 {
            continue;
        }
        let s_scale = 1.0 / (n * concepts as f64);
        for (v, g) in att.values.iter().zip(grad.values.iter_mut()) {
            sparsity += v.abs() * s_scale;
            *g += lambda_sparsity * s_scale * signum0(*v);
        }
        if concepts < 2 {
            continue;
        }
        let pairs = (concepts * (concepts - 1) / 2) as f64;
        let c_scale = 1.0 / (n * pairs);
        let norms: Vec<f64> = (0..concepts)
            .map(|j| att.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for j in 0..concepts {
            for l in (j + 1)..concepts {
                let (a, b) = (att.row(j), att.row(l));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let den = norms[j] * norms[l] + COSINE_EPS;
                let cos = dot / den;
                let (val, sign) = match mode {
                    CorrelationMode::Absolute => (cos.abs(), signum0(cos)),
                    CorrelationMode::Signed => (cos, 1.0),
                };
                correlation += val * c_scale;
                let coef = lambda_correlation * c_scale * sign;
                if coef == 0.0 {
                    continue;
                }
                // d cos / d a = b / den - dot * |b| * a / (|a| den^2)
                let ga: Vec<f64> = (0..att.dim)
                    .map(|f| {
                        let mut d = b[f] / den;
                        if norms[j] > 0.0 {
                            d -= dot * norms[l] * a[f] / (norms[j] * den * den);
                        }
                        coef * d
                    })
                    .collect();
                let gb: Vec<f64> = (0..att.dim)
                    .map(|f| {
                        let mut d = a[f] / den;
                        if norms[l] > 0.0 {
                            d -= dot * norms[j] * b[f] / (norms[l] * den * den);
                        }
                        coef * d
                    })
                    .collect();
                for (g, v) in grad.row_mut(j).iter_mut().zip(ga) {
                    *g += v;
                }
                for (g, v) in grad.row_mut(l).iter_mut().zip(gb) {
                    *g += v;
                }
            }
        }
    }

    TangosPenalty {
        value: lambda_sparsity * sparsity + lambda_correlation * correlation,
        sparsity,
        correlation,
        grads,
    }
}

#[inline]
fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Write attributions as `sample_id,concept_id,feature_id,value`.
///
/// Values carry 17 significant digits so a read-back is exact.
pub fn export_attributions(atts: &[(u64, Attribution)], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = String::from("sample_id,concept_id,feature_id,value\n");
    for (id, att) in atts {
        for j in 0..att.concepts {
            for f in 0..att.dim {
                body.push_str(&format!("{id},{j},{f},{:.16e}\n", att.get(j, f)));
            }
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// One row of an attribution CSV.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: u64,
    pub concept_id: usize,
    pub feature_id: usize,
    pub value: f64,
}

pub fn read_attributions(path: &Path) -> Result<Vec<AttributionRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema(dim: usize, concepts: usize) -> ModalitySchema {
        ModalitySchema::new("m", dim, concepts)
    }

    #[test]
    fn param_counts() {
        let e = Extractor::new(ExtractorKind::LinearSigmoid, schema(5, 3)).unwrap();
        assert_eq!(e.param_count(), 3 * 6);
        let e = Extractor::new(ExtractorKind::Mlp { hidden: vec![4, 2] }, schema(5, 3)).unwrap();
        assert_eq!(e.param_count(), (5 * 4 + 4) + (4 * 2 + 2) + (2 * 3 + 3));
        assert!(Extractor::new(ExtractorKind::LinearSigmoid, schema(0, 3)).is_err());
    }

    #[test]
    fn zero_params_give_half() {
        let e = Extractor::new(ExtractorKind::LinearSigmoid, schema(4, 3)).unwrap();
        assert_eq!(e.extract(&[1.0, -2.0, 3.0, 9.0]).unwrap(), vec![0.5; 3]);
        let e = Extractor::new(ExtractorKind::Mlp { hidden: vec![1] }, schema(4, 1)).unwrap();
        assert_eq!(e.extract(&[5.0, 1.0, 0.0, -3.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn logistic_curve() {
        let mut params = vec![0.0; 4];
        params[0] = 1.0;
        let e = Extractor::with_params(ExtractorKind::LinearSigmoid, schema(3, 1), params).unwrap();
        assert_eq!(e.extract(&[0.0, 0.0, 0.0]).unwrap()[0], 0.5);
        assert_abs_diff_eq!(e.extract(&[10.0, 0.0, 0.0]).unwrap()[0], 0.99995, epsilon = 1e-5);
    }

    #[test]
    fn dimension_mismatch() {
        let e = Extractor::new(ExtractorKind::LinearSigmoid, schema(3, 1)).unwrap();
        assert!(e.extract(&[1.0]).is_err());
        assert!(e.extract_backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
        assert!(e.attributions(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_closed_form() {
        let params = vec![0.3, -0.2, 0.5, 0.1];
        let e = Extractor::with_params(ExtractorKind::LinearSigmoid, schema(3, 1), params).unwrap();
        let x = [1.0, 2.0, -1.0];
        let p = e.extract(&x).unwrap()[0];
        let g = e.extract_backward(&x, &[1.0]).unwrap();
        let s = p * (1.0 - p);
        for r in 0..3 {
            assert_abs_diff_eq!(g[r], s * x[r], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g[3], s, epsilon = 1e-15);
        assert!(e.extract_backward(&x, &[0.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attribution_examples() {
        let params = vec![0.4, -0.8, 0.0, 0.0];
        let e = Extractor::with_params(ExtractorKind::LinearSigmoid, schema(3, 1), params).unwrap();
        // z = 0 at x = 0, so sigma' = 0.25
        let a = e.attributions(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.values, vec![0.1, -0.2, 0.0]);
        let z = Extractor::new(ExtractorKind::Mlp { hidden: vec![3] }, schema(3, 2)).unwrap();
        assert!(z.attributions(&[1.0, 2.0, 3.0]).unwrap().values.iter().all(|&v| v == 0.0));
    }

    fn random_mlp(seed: u64) -> Extractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Extractor::random(ExtractorKind::Mlp { hidden: vec![4, 3] }, schema(5, 3), &mut rng).unwrap();
        for p in &mut e.params {
            *p *= 8.0;
        }
        e
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let e = random_mlp(seed);
            let x = [0.3, -0.7, 1.1, 0.05, -0.4];
            let up = [0.7, -1.3, 0.4];
            let g = e.extract_backward(&x, &up).unwrap();
            let h = 1e-6;
            for i in 0..e.params.len() {
                let f = |d: f64| {
                    let mut e2 = e.clone();
                    e2.params[i] += d;
                    e2.extract(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!(rel_close(g[i], fd, 1e-5), "param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn attributions_match_finite_differences() {
        for seed in 0..5 {
            let e = random_mlp(seed);
            let x = vec![0.3, -0.7, 1.1, 0.05, -0.4];
            let a = e.attributions(&x).unwrap();
            let h = 1e-6;
            for f in 0..5 {
                let mut up = x.clone();
                let mut down = x.clone();
                up[f] += h;
                down[f] -= h;
                let (pu, pd) = (e.extract(&up).unwrap(), e.extract(&down).unwrap());
                for j in 0..3 {
                    let fd = (pu[j] - pd[j]) / (2.0 * h);
                    assert!(rel_close(a.get(j, f), fd, 1e-5));
                }
            }
        }
    }

    #[test]
    fn attribution_backward_matches_finite_differences() {
        for (seed, kind) in [
            (1, ExtractorKind::LinearSigmoid),
            (2, ExtractorKind::Mlp { hidden: vec![4] }),
            (3, ExtractorKind::Mlp { hidden: vec![4, 3] }),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut e = Extractor::random(kind, schema(5, 3), &mut rng).unwrap();
            for p in &mut e.params {
                *p *= 8.0;
            }
            let x = [0.3, -0.7, 1.1, 0.05, -0.4];
            let up_att = Attribution {
                concepts: 3,
                dim: 5,
                values: (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
            };
            let up_out = [0.2, -0.5, 0.9];
            let g = e.attributions_backward(&x, Some(&up_out), &up_att).unwrap();
            let h = 1e-6;
            for i in 0..e.params.len() {
                let f = |d: f64| {
                    let mut e2 = e.clone();
                    e2.params[i] += d;
                    let a = e2.attributions(&x).unwrap();
                    let p = e2.extract(&x).unwrap();
                    a.values.iter().zip(&up_att.values).map(|(a, b)| a * b).sum::<f64>()
                        + p.iter().zip(&up_out).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!(rel_close(g[i], fd, 1e-5), "seed {seed} param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    fn att(rows: &[&[f64]]) -> Attribution {
        Attribution {
            concepts: rows.len(),
            dim: rows[0].len(),
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn tangos_examples() {
        let same = att(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let p = tangos_penalty(&[same], 0.0, 1.0, CorrelationMode::Absolute);
        assert_abs_diff_eq!(p.value, 1.0, epsilon = 1e-9);
        let ortho = att(&[&[1.0, 0.0], &[0.0, 3.0]]);
        assert_eq!(tangos_penalty(&[ortho], 0.0, 1.0, CorrelationMode::Absolute).value, 0.0);
        let single = att(&[&[0.5, -0.5]]);
        assert_abs_diff_eq!(
            tangos_penalty(&[single], 1.0, 0.0, CorrelationMode::Absolute).value,
            1.0,
            epsilon = 1e-15
        );
        let opposite = att(&[&[1.0, 2.0], &[-1.0, -2.0]]);
        let abs = tangos_penalty(&[opposite.clone()], 0.0, 1.0, CorrelationMode::Absolute).value;
        let signed = tangos_penalty(&[opposite], 0.0, 1.0, CorrelationMode::Signed).value;
        assert_abs_diff_eq!(abs, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(signed, -1.0, epsilon = 1e-9);
        let zero = att(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(tangos_penalty(&[zero], 0.0, 1.0, CorrelationMode::Absolute).value, 0.0);
    }

    #[test]
    fn tangos_order_and_scaling() {
        let a = att(&[&[1.0, 2.0, -1.0], &[0.5, -0.3, 0.2], &[0.0, 1.0, 1.0]]);
        let b = att(&[&[-0.2, 0.1, 0.4], &[1.5, 0.3, 0.0], &[0.7, -1.0, 0.3]]);
        let p1 = tangos_penalty(&[a.clone(), b.clone()], 0.3, 0.7, CorrelationMode::Absolute);
        let p2 = tangos_penalty(&[b.clone(), a.clone()], 0.3, 0.7, CorrelationMode::Absolute);
        assert_abs_diff_eq!(p1.value, p2.value, epsilon = 1e-15);
        let p3 = tangos_penalty(&[a.clone(), b.clone()], 0.6, 0.7, CorrelationMode::Absolute);
        assert_abs_diff_eq!(p3.value - p1.value, 0.3 * p1.sparsity, epsilon = 1e-12);
        let p4 = tangos_penalty(&[a, b], 0.3, 2.1, CorrelationMode::Absolute);
        assert_abs_diff_eq!(p4.value - p1.value, 1.4 * p1.correlation, epsilon = 1e-12);
    }

    #[test]
    fn tangos_gradient_matches_finite_differences() {
        let base = vec![
            att(&[&[1.0, 2.0, -1.0], &[0.5, -0.3, 0.2], &[0.1, 1.0, 1.0]]),
            att(&[&[-0.2, 0.1, 0.4], &[1.5, 0.3, 0.6], &[0.7, -1.0, 0.3]]),
        ];
        for mode in [CorrelationMode::Absolute, CorrelationMode::Signed] {
            let p = tangos_penalty(&base, 0.4, 0.9, mode);
            let h = 1e-6;
            for s in 0..2 {
                for i in 0..9 {
                    let f = |d: f64| {
                        let mut b = base.clone();
                        b[s].values[i] += d;
                        tangos_penalty(&b, 0.4, 0.9, mode).value
                    };
                    let fd = (f(h) - f(-h)) / (2.0 * h);
                    assert!(rel_close(p.grads[s].values[i], fd, 1e-5));
                }
            }
        }
    }

    #[test]
    fn attribution_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.csv");
        let a = att(&[&[0.1, 1.0 / 3.0, -2.5e-17], &[std::f64::consts::PI, 0.0, -7.0]]);
        export_attributions(&[(42, a.clone())], &path).unwrap();
        let rows = read_attributions(&path).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.sample_id, 42);
            assert_eq!(r.value, a.get(r.concept_id, r.feature_id));
        }
        export_attributions(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "sample_id,concept_id,feature_id,value\n");
        assert!(read_attributions(&path).unwrap().is_empty());
        let bad = dir.path().join("missing").join("x.csv");
        let err = export_attributions(&[], &bad).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
