//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in call order; `backward` walks the tape in
//! exact reverse order and accumulates gradients additively into shared
//! inputs. Accumulation is plain left-to-right row-major loops, so results
//! are bit-reproducible on a single thread.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a `Graph` tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

enum Rule {
    Leaf,
    Add,
    Sub,
    Neg,
    Scale(f64),
    AddScalar,
    Mul,
    Log,
    Relu,
    Sigmoid,
    SoftmaxRows,
    MatmulBias,
    TopkMeanColumns { k: usize, selected: Vec<Vec<usize>> },
    Clamp { lo: f64, hi: f64 },
    Reshape,
    Sum,
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Rule,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-column indices of the k largest entries, values descending, ties
/// broken by lower row index. `m` is a 2-D tensor.
pub fn topk_column_indices(m: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = (m.rows(), m.cols());
    if k < 1 || k > rows {
        return Err(Error::InvalidArgument(format!(
            "top-k count {k} out of range for {rows} rows"
        )));
    }
    let mut selected = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.sort_by(|&a, &b| {
            m.at2(b, c)
                .partial_cmp(&m.at2(a, c))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        selected.push(idx);
    }
    Ok(selected)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, inputs: Vec<usize>, rule: Rule) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], Rule::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Selected row indices per column of a `topk_mean_columns` node.
    pub fn topk_selected(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].rule {
            Rule::TopkMeanColumns { selected, .. } => Some(selected),
            _ => None,
        }
    }

    fn binary_values(&self, a: Var, b: Var, op: &str) -> Result<(&Tensor, &Tensor)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok((ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_values(a, b, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a.0, b.0], Rule::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_values(a, b, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a.0, b.0], Rule::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_values(a, b, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a.0, b.0], Rule::Mul))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| -x).collect())
            .expect("same shape");
        self.push(out, vec![a.0], Rule::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        self.push(out, vec![a.0], Rule::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x + c).collect(),
        )
        .expect("same shape");
        self.push(out, vec![a.0], Rule::AddScalar)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument(
                "log requires strictly positive inputs".into(),
            ));
        }
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.ln()).collect(),
        )?;
        Ok(self.push(out, vec![a.0], Rule::Log))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(out, vec![a.0], Rule::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| stable_sigmoid(x)).collect(),
        )
        .expect("same shape");
        self.push(out, vec![a.0], Rule::Sigmoid)
    }

    /// Row-wise softmax of a 2-D tensor, shifted by the row max before
    /// exponentiation.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch("softmax_rows expects 2-D".into()));
        }
        if ta.cols() < 2 {
            return Err(Error::InvalidArgument(
                "softmax_rows requires at least 2 columns".into(),
            ));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                mx = mx.max(ta.at2(r, c));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (ta.at2(r, c) - mx).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, vec![a.0], Rule::SoftmaxRows))
    }

    /// h(Z) = W Z^T + b laid out row-per-instance: out[m][c] = W[c].Z[m] + b[c].
    pub fn matmul_bias(&mut self, w: Var, z: Var, b: Var) -> Result<Var> {
        let (tw, tz, tb) = (
            &self.nodes[w.0].value,
            &self.nodes[z.0].value,
            &self.nodes[b.0].value,
        );
        if tw.shape().len() != 2 || tz.shape().len() != 2 || tb.shape().len() != 1 {
            return Err(Error::ShapeMismatch(
                "matmul_bias expects W 2-D, Z 2-D, b 1-D".into(),
            ));
        }
        let (c_out, d) = (tw.rows(), tw.cols());
        let (m, dz) = (tz.rows(), tz.cols());
        if d != dz || tb.numel() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "matmul_bias: W {:?}, Z {:?}, b {:?}",
                tw.shape(),
                tz.shape(),
                tb.shape()
            )));
        }
        let mut data = vec![0.0; m * c_out];
        for i in 0..m {
            for c in 0..c_out {
                let mut acc = tb.data()[c];
                for k in 0..d {
                    acc += tw.at2(c, k) * tz.at2(i, k);
                }
                data[i * c_out + c] = acc;
            }
        }
        let out = Tensor::new(vec![m, c_out], data)?;
        Ok(self.push(out, vec![w.0, z.0, b.0], Rule::MatmulBias))
    }

    /// Per-column mean of the k largest entries of a 2-D tensor; output is a
    /// length-cols vector. The selected index sets are fixed at forward time
    /// and route a 1/k subgradient on backward.
    pub fn topk_mean_columns(&mut self, a: Var, k: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch("topk_mean_columns expects 2-D".into()));
        }
        let selected = topk_column_indices(ta, k)?;
        let cols = ta.cols();
        let mut data = vec![0.0; cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for &r in &selected[c] {
                acc += ta.at2(r, c);
            }
            data[c] = acc / k as f64;
        }
        let out = Tensor::new(vec![cols], data)?;
        Ok(self.push(out, vec![a.0], Rule::TopkMeanColumns { k, selected }))
    }

    /// Clamp to [lo, hi]; subgradient is 1 strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        )
        .expect("same shape");
        self.push(out, vec![a.0], Rule::Clamp { lo, hi })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(out, vec![a.0], Rule::Reshape))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut acc = 0.0;
        for &x in ta.data() {
            acc += x;
        }
        self.push(Tensor::scalar(acc), vec![a.0], Rule::Sum)
    }

    /// Reverse accumulation from a scalar output. Returns one gradient per
    /// node id; leaves never reached by the graph get zero gradients.
    pub fn backward(&self, output: Var) -> Result<Vec<Tensor>> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(Error::InvalidArgument(
                "backward requires a scalar output".into(),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[output.0] = Tensor::scalar(1.0);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let g = grads[id].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            match &node.rule {
                Rule::Leaf => {}
                Rule::Add => {
                    accumulate(&mut grads[node.inputs[0]], g.data(), 1.0);
                    accumulate(&mut grads[node.inputs[1]], g.data(), 1.0);
                }
                Rule::Sub => {
                    accumulate(&mut grads[node.inputs[0]], g.data(), 1.0);
                    accumulate(&mut grads[node.inputs[1]], g.data(), -1.0);
                }
                Rule::Neg => accumulate(&mut grads[node.inputs[0]], g.data(), -1.0),
                Rule::Scale(c) => accumulate(&mut grads[node.inputs[0]], g.data(), *c),
                Rule::AddScalar => accumulate(&mut grads[node.inputs[0]], g.data(), 1.0),
                Rule::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let av = self.nodes[a].value.data().to_vec();
                    let bv = self.nodes[b].value.data().to_vec();
                    for (i, &gi) in g.data().iter().enumerate() {
                        grads[a].data_mut()[i] += gi * bv[i];
                        grads[b].data_mut()[i] += gi * av[i];
                    }
                }
                Rule::Log => {
                    let a = node.inputs[0];
                    let av = self.nodes[a].value.data().to_vec();
                    for (i, &gi) in g.data().iter().enumerate() {
                        grads[a].data_mut()[i] += gi / av[i];
                    }
                }
                Rule::Relu => {
                    let a = node.inputs[0];
                    let av = self.nodes[a].value.data().to_vec();
                    for (i, &gi) in g.data().iter().enumerate() {
                        if av[i] > 0.0 {
                            grads[a].data_mut()[i] += gi;
                        }
                    }
                }
                Rule::Sigmoid => {
                    let a = node.inputs[0];
                    let yv = node.value.data().to_vec();
                    for (i, &gi) in g.data().iter().enumerate() {
                        grads[a].data_mut()[i] += gi * yv[i] * (1.0 - yv[i]);
                    }
                }
                Rule::SoftmaxRows => {
                    let a = node.inputs[0];
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g.data()[r * cols + c] * y.at2(r, c);
                        }
                        for c in 0..cols {
                            ga[r * cols + c] = y.at2(r, c) * (g.data()[r * cols + c] - dot);
                        }
                    }
                    accumulate(&mut grads[a], &ga, 1.0);
                }
                Rule::MatmulBias => {
                    let (w, z, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let tw = self.nodes[w].value.clone();
                    let tz = self.nodes[z].value.clone();
                    let (c_out, d) = (tw.rows(), tw.cols());
                    let m = tz.rows();
                    for i in 0..m {
                        for c in 0..c_out {
                            let gi = g.data()[i * c_out + c];
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                grads[w].data_mut()[c * d + k] += gi * tz.at2(i, k);
                                grads[z].data_mut()[i * d + k] += gi * tw.at2(c, k);
                            }
                            grads[b].data_mut()[c] += gi;
                        }
                    }
                }
                Rule::TopkMeanColumns { k, selected } => {
                    let a = node.inputs[0];
                    let cols = self.nodes[a].value.cols();
                    let inv_k = 1.0 / *k as f64;
                    for c in 0..cols {
                        let gc = g.data()[c] * inv_k;
                        for &r in &selected[c] {
                            grads[a].data_mut()[r * cols + c] += gc;
                        }
                    }
                }
                Rule::Clamp { lo, hi } => {
                    let a = node.inputs[0];
                    let av = self.nodes[a].value.data().to_vec();
                    for (i, &gi) in g.data().iter().enumerate() {
                        if av[i] > *lo && av[i] < *hi {
                            grads[a].data_mut()[i] += gi;
                        }
                    }
                }
                Rule::Reshape => {
                    accumulate(&mut grads[node.inputs[0]], g.data(), 1.0);
                }
                Rule::Sum => {
                    let a = node.inputs[0];
                    let gs = g.data()[0];
                    for v in grads[a].data_mut() {
                        *v += gs;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(target: &mut Tensor, src: &[f64], factor: f64) {
    for (t, &s) in target.data_mut().iter_mut().zip(src) {
        *t += s * factor;
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, over every element of every parameter:
/// |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let out = f(&mut graph, &vars)?;
    graph.value(out).check_finite("grad_check output")?;
    let grads = graph.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| g.leaf(p.clone())).collect();
        let o = f(&mut g, &vs)?;
        let v = g.value(o).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += step;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let analytic = grads[vars[pi].id()].data()[ei];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let one = g.leaf(Tensor::vector(vec![1.0]));
        let l = g.log(one).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![0.0]));
        assert!(g.log(a).is_err());
    }

    #[test]
    fn mul_matches_elementwise_oracle() {
        let mut rng = RandomStream::new(5);
        let a = rng.uniform_tensor(-1.0, 1.0, &[2, 3]).unwrap();
        let b = rng.uniform_tensor(-1.0, 1.0, &[2, 3]).unwrap();
        let mut g = Graph::new();
        let va = g.leaf(a.clone());
        let vb = g.leaf(b.clone());
        let m = g.mul(va, vb).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.value(m).at2(r, c), a.at2(r, c) * b.at2(r, c));
            }
        }
    }

    #[test]
    fn matmul_bias_small_cases() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let z = g.leaf(Tensor::matrix(&[vec![2.0, 3.0]]).unwrap());
        let b = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let out = g.matmul_bias(w, z, b).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 3.0]);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let z = g.leaf(Tensor::matrix(&[vec![3.0, 4.0]]).unwrap());
        let b = g.leaf(Tensor::vector(vec![1.0]));
        let out = g.matmul_bias(w, z, b).unwrap();
        assert_eq!(g.value(out).data(), &[12.0]);
    }

    #[test]
    fn matmul_bias_matches_triple_loop_oracle() {
        let mut rng = RandomStream::new(17);
        let w = rng.uniform_tensor(-1.0, 1.0, &[3, 7]).unwrap();
        let z = rng.uniform_tensor(-1.0, 1.0, &[5, 7]).unwrap();
        let b = rng.uniform_tensor(-1.0, 1.0, &[3]).unwrap();
        let mut g = Graph::new();
        let (vw, vz, vb) = (g.leaf(w.clone()), g.leaf(z.clone()), g.leaf(b.clone()));
        let out = g.matmul_bias(vw, vz, vb).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let mut acc = b.data()[c];
                for k in 0..7 {
                    acc += w.at2(c, k) * z.at2(i, k);
                }
                assert!((g.value(out).at2(i, c) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relu_values_and_grad_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[x.id()].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 100.0, -1.0, -745.0]));
        let y = g.sigmoid(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-12);
        assert!((d[2] - 0.2689414213699951).abs() < 1e-15);
        assert!(d[3].is_finite() && d[3] >= 0.0);
    }

    #[test]
    fn softmax_rows_properties() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(&[vec![0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        // shift invariance
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let b = g.leaf(Tensor::matrix(&[vec![101.0, 102.0, 103.0]]).unwrap());
        let ya = g.softmax_rows(a).unwrap();
        let yb = g.softmax_rows(b).unwrap();
        let (va, vb) = (g.value(ya).clone(), g.value(yb).clone());
        assert!(va.max_abs_diff(&vb).unwrap() <= 1e-12);

        // direct exp/sum oracle on [1,2,3]
        let exps: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|x: &f64| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            assert!((va.data()[i] - e / total).abs() <= 1e-14);
        }
        assert!((va.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn topk_identities_and_ties() {
        let col = Tensor::new(vec![4, 1], vec![0.9, 0.5, 0.2, 0.1]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(col.clone());
        let max1 = g.topk_mean_columns(v, 1).unwrap();
        assert_eq!(g.value(max1).data(), &[0.9]);
        let mean = g.topk_mean_columns(v, 4).unwrap();
        assert!((g.value(mean).data()[0] - 0.425).abs() <= 1e-15);
        assert!(g.topk_mean_columns(v, 5).is_err());
        assert!(g.topk_mean_columns(v, 0).is_err());

        let tie = Tensor::new(vec![3, 1], vec![1.0, 1.0, 0.0]).unwrap();
        let sel = topk_column_indices(&tie, 1).unwrap();
        assert_eq!(sel[0], vec![0]);
    }

    #[test]
    fn topk_backward_routing() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(vec![3, 1], vec![0.9, 0.5, 0.2]).unwrap());
        let pooled = g.topk_mean_columns(v, 2).unwrap();
        let s = g.sum(pooled);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[v.id()].data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn sigmoid_of_linear_grad() {
        // d/dz sigmoid(w z) at w=1, z=0 is 0.25
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(&[vec![1.0]]).unwrap());
        let z = g.leaf(Tensor::matrix(&[vec![0.0]]).unwrap());
        let b = g.leaf(Tensor::vector(vec![0.0]));
        let lin = g.matmul_bias(w, z, b).unwrap();
        let y = g.sigmoid(lin);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!((grads[z.id()].data()[0] - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0));
        let unused = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[unused.id()].data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_linear_model() {
        let w0 = Tensor::vector(vec![0.7, -0.3]);
        let z0 = Tensor::vector(vec![0.2, 0.9]);
        let err = grad_check(
            |g, vars| {
                let p = g.mul(vars[0], vars[1])?;
                Ok(g.sum(p))
            },
            &[w0, z0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_detects_corrupted_rule() {
        // Analytic gradient doubled via y = x + x against numeric of y = 2x
        // is correct, so instead corrupt by comparing scale(2) analytic to a
        // forward that only uses scale(1) on the perturbed path. Simplest
        // honest fault injection: compare grad of sum(2x) to finite
        // differences of sum(x) computed by hand.
        let x = Tensor::vector(vec![0.5]);
        let mut g = Graph::new();
        let vx = g.leaf(x.clone());
        let doubled = g.scale(vx, 2.0);
        let s = g.sum(doubled);
        let grads = g.backward(s).unwrap();
        let analytic = grads[vx.id()].data()[0]; // 2.0
        let h = 1e-5;
        let numeric = ((0.5 + h) - (0.5 - h)) / (2.0 * h); // d/dx of x = 1.0
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        assert!(err >= 0.4, "err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, _vars| {
                let c = g.leaf(Tensor::scalar(3.0));
                Ok(g.sum(c))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_random_compositions() {
        // 100 random recorded computations built from the op set.
        let mut rng = RandomStream::new(99);
        for _ in 0..100 {
            let m = rng.uniform_int(2, 6);
            let d = rng.uniform_int(2, 4);
            let z = rng.uniform_tensor(-1.0, 1.0, &[m, d]).unwrap();
            let w = rng.uniform_tensor(-1.0, 1.0, &[2, d]).unwrap();
            let b = rng.uniform_tensor(-0.5, 0.5, &[2]).unwrap();
            let k = rng.uniform_int(1, m);
            let err = grad_check(
                move |g, vars| {
                    let lin = g.matmul_bias(vars[0], vars[1], vars[2])?;
                    let act = g.sigmoid(lin);
                    let pooled = g.topk_mean_columns(act, k)?;
                    let shifted = g.add_scalar(pooled, 1.0);
                    let logv = g.log(shifted)?;
                    Ok(g.sum(logv))
                },
                &[w, z, b],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "err {err}");
        }
    }
}
