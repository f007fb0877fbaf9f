//! Reverse-mode tape over vector-valued nodes.
//!
//! Scalars are length-1 vectors. Every primitive checks its output for
//! non-finite values and fails naming the offending primitive. Arguments to
//! `exp` are clamped to [-30, 30] before exponentiation; clamp events are
//! counted and reported through [`Tape::clamp_events`].

use crate::{Error, Result};

/// Clamp bound for exp arguments.
const EXP_CLAMP: f64 = 30.0;

/// Norm floor for L2 normalization.
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        w: usize,
        b: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    Tanh {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Normalize {
        x: usize,
        norm_eff: f64,
    },
    Dot {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Neg {
        x: usize,
    },
    AddConst {
        x: usize,
    },
    MulConst {
        x: usize,
        c: f64,
    },
    Exp {
        x: usize,
    },
    Ln {
        x: usize,
    },
    PowConst {
        x: usize,
        e: f64,
    },
    Sqrt {
        x: usize,
    },
    SumElems {
        x: usize,
    },
    SumList {
        xs: Vec<usize>,
    },
    MaxList {
        xs: Vec<usize>,
        argmax: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Reverse-mode tape. Parameters registered through [`Tape::param`] receive
/// gradients from [`Tape::backward`], concatenated in registration order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    clamp_events: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times an exp argument was clamped so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let val = self.value(v);
        if val.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected scalar node, got length {}",
                val.len()
            )));
        }
        Ok(val[0])
    }

    fn push(&mut self, op: Op, value: Vec<f64>, name: &'static str) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant vector; receives no gradient.
    pub fn constant(&mut self, values: &[f64]) -> Result<Var> {
        self.push(Op::Leaf, values.to_vec(), "constant")
    }

    /// A constant scalar.
    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(&[value])
    }

    /// A trainable parameter leaf. Gradients are collected in registration
    /// order by [`Tape::backward`].
    pub fn param(&mut self, values: &[f64]) -> Result<Var> {
        let v = self.push(Op::Leaf, values.to_vec(), "param")?;
        self.params.push(v.0);
        Ok(v)
    }

    /// Total length of all registered parameters.
    pub fn param_len(&self) -> usize {
        self.params.iter().map(|&i| self.nodes[i].value.len()).sum()
    }

    /// Affine map: `W x + b` with `W` stored row-major as a flat vector.
    pub fn affine(&mut self, w: Var, b: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let xv = &self.nodes[x.0].value;
        if wv.len() != rows * cols || bv.len() != rows || xv.len() != cols {
            return Err(Error::DimensionMismatch(format!(
                "affine: W has {} entries (want {}x{}), b has {}, x has {}",
                wv.len(),
                rows,
                cols,
                bv.len(),
                xv.len()
            )));
        }
        let mut out = bv.clone();
        for i in 0..rows {
            let row = &wv[i * cols..(i + 1) * cols];
            out[i] += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(
            Op::Affine {
                w: w.0,
                b: b.0,
                x: x.0,
                rows,
                cols,
            },
            out,
            "affine",
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh { x: x.0 }, out, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu { x: x.0 }, out, "relu")
    }

    /// L2-normalize. Norms below 1e-12 are floored by adding 1e-12.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_eff = if norm < NORM_FLOOR {
            norm + NORM_FLOOR
        } else {
            norm
        };
        let out: Vec<f64> = xv.iter().map(|v| v / norm_eff).collect();
        self.push(Op::Normalize { x: x.0, norm_eff }, out, "normalize")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.len() != bv.len() {
            return Err(Error::DimensionMismatch(format!(
                "dot: lengths {} and {}",
                av.len(),
                bv.len()
            )));
        }
        let out = av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>();
        self.push(Op::Dot { a: a.0, b: b.0 }, vec![out], "dot")
    }

    fn elementwise_pair(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.len() != bv.len() {
            return Err(Error::DimensionMismatch(format!(
                "{name}: lengths {} and {}",
                av.len(),
                bv.len()
            )));
        }
        let out: Vec<f64> = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        self.push(op(a.0, b.0), out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| -v).collect();
        self.push(Op::Neg { x: x.0 }, out, "neg")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        self.push(Op::AddConst { x: x.0 }, out, "add_const")
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        self.push(Op::MulConst { x: x.0, c }, out, "mul_const")
    }

    /// Elementwise exp with arguments clamped to [-30, 30].
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let mut clamped = 0usize;
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| {
                if v.abs() > EXP_CLAMP {
                    clamped += 1;
                }
                v.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
            })
            .collect();
        if clamped > 0 {
            self.clamp_events += clamped;
            log::debug!("exp: clamped {clamped} argument(s) to +/-{EXP_CLAMP}");
        }
        self.push(Op::Exp { x: x.0 }, out, "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(Op::Ln { x: x.0 }, out, "ln")
    }

    /// Elementwise power with a constant exponent. Bases are expected
    /// non-negative.
    pub fn pow_const(&mut self, x: Var, e: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.powf(e)).collect();
        self.push(Op::PowConst { x: x.0, e }, out, "pow_const")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt { x: x.0 }, out, "sqrt")
    }

    /// Sum of all elements of a vector node, producing a scalar.
    pub fn sum_elems(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().sum::<f64>();
        self.push(Op::SumElems { x: x.0 }, vec![out], "sum_elems")
    }

    /// Sum of a list of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        let mut ids = Vec::with_capacity(xs.len());
        for &v in xs {
            total += self.scalar_value(v)?;
            ids.push(v.0);
        }
        self.push(Op::SumList { xs: ids }, vec![total], "sum")
    }

    /// Max over a finite list of scalar nodes. The gradient flows to the
    /// argmax element only; ties break toward the lowest index.
    pub fn max(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("max over empty set".into()));
        }
        let mut best = f64::NEG_INFINITY;
        let mut argmax = 0usize;
        let mut ids = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let val = self.scalar_value(v)?;
            if val > best {
                best = val;
                argmax = i;
            }
            ids.push(v.0);
        }
        self.push(Op::MaxList { xs: ids, argmax }, vec![best], "max")
    }

    /// Reverse pass from a scalar output. Returns the gradient with respect
    /// to every registered parameter, flattened in registration order.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        let out_val = self.scalar_value(output)?;
        if !out_val.is_finite() {
            return Err(Error::NonFinite {
                op: "backward output",
            });
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.iter().all(|&v| v == 0.0) {
                adj[i] = g;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Affine {
                    w,
                    b,
                    x,
                    rows,
                    cols,
                } => {
                    let wv = self.nodes[*w].value.clone();
                    let xv = self.nodes[*x].value.clone();
                    for r in 0..*rows {
                        let gr = g[r];
                        adj[*b][r] += gr;
                        for c in 0..*cols {
                            adj[*w][r * cols + c] += gr * xv[c];
                            adj[*x][c] += gr * wv[r * cols + c];
                        }
                    }
                }
                Op::Tanh { x } => {
                    let yv = &self.nodes[i].value;
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += gk * (1.0 - yv[k] * yv[k]);
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    for (k, gk) in g.iter().enumerate() {
                        if xv[k] > 0.0 {
                            adj[*x][k] += gk;
                        }
                    }
                }
                Op::Normalize { x, norm_eff } => {
                    let yv = &self.nodes[i].value;
                    let g_dot_y: f64 = g.iter().zip(yv).map(|(a, b)| a * b).sum();
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += (gk - g_dot_y * yv[k]) / norm_eff;
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let gs = g[0];
                    for k in 0..av.len() {
                        adj[*a][k] += gs * bv[k];
                        adj[*b][k] += gs * av[k];
                    }
                }
                Op::Add { a, b } => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[*a][k] += gk;
                        adj[*b][k] += gk;
                    }
                }
                Op::Sub { a, b } => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[*a][k] += gk;
                        adj[*b][k] -= gk;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    for (k, gk) in g.iter().enumerate() {
                        adj[*a][k] += gk * bv[k];
                        adj[*b][k] += gk * av[k];
                    }
                }
                Op::Neg { x } => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] -= gk;
                    }
                }
                Op::AddConst { x } => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += gk;
                    }
                }
                Op::MulConst { x, c } => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += gk * c;
                    }
                }
                Op::Exp { x } => {
                    let xv = &self.nodes[*x].value;
                    let yv = &self.nodes[i].value;
                    for (k, gk) in g.iter().enumerate() {
                        // zero slope outside the clamp window
                        if xv[k].abs() <= EXP_CLAMP {
                            adj[*x][k] += gk * yv[k];
                        }
                    }
                }
                Op::Ln { x } => {
                    let xv = &self.nodes[*x].value;
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += gk / xv[k];
                    }
                }
                Op::PowConst { x, e } => {
                    let xv = &self.nodes[*x].value;
                    for (k, gk) in g.iter().enumerate() {
                        let base = if *e < 1.0 { xv[k].max(1e-12) } else { xv[k] };
                        adj[*x][k] += gk * e * base.powf(e - 1.0);
                    }
                }
                Op::Sqrt { x } => {
                    let yv = &self.nodes[i].value;
                    for (k, gk) in g.iter().enumerate() {
                        adj[*x][k] += gk / (2.0 * yv[k].max(1e-12));
                    }
                }
                Op::SumElems { x } => {
                    let gs = g[0];
                    for v in adj[*x].iter_mut() {
                        *v += gs;
                    }
                }
                Op::SumList { xs } => {
                    let gs = g[0];
                    for &x in xs {
                        adj[x][0] += gs;
                    }
                }
                Op::MaxList { xs, argmax } => {
                    adj[xs[*argmax]][0] += g[0];
                }
            }
            adj[i] = g;
        }

        let mut grads = Vec::with_capacity(self.param_len());
        for &p in &self.params {
            grads.extend_from_slice(&adj[p]);
        }
        if !grads.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "backward gradient",
            });
        }
        Ok(grads)
    }
}

/// Build a loss graph with the given closure, evaluate it, and return the
/// loss value together with the gradient with respect to every parameter
/// the closure registered (in registration order).
pub fn evaluate_with_grad<F>(build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    let loss = tape.scalar_value(out)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(out)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function() {
        // f(x) = x^2 at x = 3
        let (loss, grads) = evaluate_with_grad(|t| {
            let x = t.param(&[3.0])?;
            t.mul(x, x)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads, vec![6.0]);
    }

    #[test]
    fn logistic_loss_at_zero() {
        // f(z) = log(1 + exp(-z)) at z = 0 -> loss ln 2, grad -0.5
        let (loss, grads) = evaluate_with_grad(|t| {
            let z = t.param(&[0.0])?;
            let nz = t.neg(z)?;
            let e = t.exp(nz)?;
            let one_plus = t.add_const(e, 1.0)?;
            t.ln(one_plus)
        })
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grads[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn max_ties_break_low_index() {
        let (loss, grads) = evaluate_with_grad(|t| {
            let a = t.param(&[2.0])?;
            let b = t.param(&[2.0])?;
            t.max(&[a, b])
        })
        .unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grads, vec![1.0, 0.0]);
    }

    #[test]
    fn exp_clamp_is_recorded_and_flat() {
        let mut tape = Tape::new();
        let x = tape.param(&[100.0]).unwrap();
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.clamp_events(), 1);
        assert!((tape.value(y)[0] - 30.0f64.exp()).abs() < 1e-3);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads, vec![0.0]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let mut tape = Tape::new();
        let w = tape.param(&[1.0, 2.0]).unwrap();
        let b = tape.param(&[0.0]).unwrap();
        let x = tape.constant(&[1.0, 2.0, 3.0]).unwrap();
        assert!(tape.affine(w, b, x, 1, 2).is_err());
    }

    #[test]
    fn nonfinite_names_primitive() {
        let mut tape = Tape::new();
        let x = tape.constant(&[-1.0]).unwrap();
        let err = tape.ln(x).unwrap_err();
        assert!(err.to_string().contains("ln"), "{err}");
    }

    #[test]
    fn normalize_unit_output() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3.0, 4.0]).unwrap();
        let y = tape.normalize(x).unwrap();
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.8).abs() < 1e-15);
    }
}
