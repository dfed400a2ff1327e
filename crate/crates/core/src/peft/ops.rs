//! Graph-level building blocks of the tuning methods.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::peft::hooks::{GateSlot, ScaleShape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[X_p; X_e]`. An empty prompt returns `X_e` itself.
pub fn compose_prompt<T: Scalar>(g: &mut Graph<T>, prompt: Var, embedded: Var) -> Result<Var> {
    let (k, wp) = g.shape(prompt);
    let (_, we) = g.shape(embedded);
    if wp != we {
        return Err(Error::shape("compose_prompt", format!("prompt width {wp} vs embedding width {we}")));
    }
    if k == 0 {
        return Ok(embedded);
    }
    g.concat_rows(&[prompt, embedded])
}

/// `[s ⊙ X_p; X_e]` where `s` is `k×1`, `1×1` or `k×n_e` per `shape`.
pub fn compose_scaled_prompt<T: Scalar>(
    g: &mut Graph<T>,
    prompt: Var,
    scale: Var,
    shape: ScaleShape,
    embedded: Var,
) -> Result<Var> {
    let (k, w) = g.shape(prompt);
    let ss = g.shape(scale);
    let scaled = match shape {
        ScaleShape::Vector if ss == (k, 1) => g.row_scale(prompt, scale)?,
        ScaleShape::Scalar if ss == (1, 1) => g.scale_by(prompt, scale)?,
        ScaleShape::Matrix if ss == (k, w) => g.mul(prompt, scale)?,
        _ => {
            return Err(Error::shape(
                "compose_scaled_prompt",
                format!("{shape:?} scale of shape {ss:?} for a {k}x{w} prompt"),
            ))
        }
    };
    compose_prompt(g, scaled, embedded)
}

/// `K' = [P_k; K]`, `V' = [P_v; V]`.
pub fn prefix_kv_extend<T: Scalar>(g: &mut Graph<T>, keys: Var, values: Var, pk: Var, pv: Var) -> Result<(Var, Var)> {
    let (_, wk) = g.shape(keys);
    let (_, wv) = g.shape(values);
    let (pkr, pkw) = g.shape(pk);
    let (pvr, pvw) = g.shape(pv);
    if pkw != wk || pvw != wv || pkr != pvr {
        return Err(Error::shape(
            "prefix_kv_extend",
            format!("keys width {wk}, values width {wv}, prefix keys {pkr}x{pkw}, prefix values {pvr}x{pvw}"),
        ));
    }
    if pkr == 0 {
        return Ok((keys, values));
    }
    Ok((g.concat_rows(&[pk, keys])?, g.concat_rows(&[pv, values])?))
}

/// `scaling · (x·A)·B` for `A: d_in×r`, `B: r×d_out`.
pub fn lora_delta<T: Scalar>(g: &mut Graph<T>, x: Var, a: Var, b: Var, scaling: T) -> Result<Var> {
    let (_, r) = g.shape(a);
    let (rb, _) = g.shape(b);
    if r != rb {
        return Err(Error::shape("lora", format!("A has rank {r}, B has rank {rb}")));
    }
    let xa = g.matmul(x, a)?;
    let d = g.matmul(xa, b)?;
    Ok(if scaling == T::one() { d } else { g.scale(d, scaling) })
}

/// `x·W + scaling · (x·A)·B`.
pub fn lora_apply<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, a: Var, b: Var, scaling: T) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let delta = lora_delta(g, x, a, b, scaling)?;
    if g.shape(base) != g.shape(delta) {
        return Err(Error::shape("lora_apply", format!("W gives {:?}, A·B gives {:?}", g.shape(base), g.shape(delta))));
    }
    g.add(base, delta)
}

/// `W + scaling · A·B`, a plain weight with no inference-time overhead.
pub fn lora_merge<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scaling: T) -> Result<Tensor<T>> {
    let (din, dout) = w.dims2()?;
    let (ar, r) = a.dims2()?;
    let (rb, bc) = b.dims2()?;
    if ar != din || rb != r || bc != dout {
        return Err(Error::shape(
            "lora_merge",
            format!("W {din}x{dout}, A {ar}x{r}, B {rb}x{bc}"),
        ));
    }
    let mut ab = vec![T::zero(); din * dout];
    T::gemm(din, r, dout, a.data(), (r, 1), b.data(), (dout, 1), &mut ab, false);
    let merged = w.data().iter().zip(&ab).map(|(x, d)| *x + scaling * *d).collect();
    Tensor::new(&[din, dout], merged)
}

/// Residual bottleneck `h + relu(h·W_down + b_down)·W_up + b_up`.
pub fn bottleneck_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    w_down: Var,
    b_down: Var,
    w_up: Var,
    b_up: Var,
) -> Result<Var> {
    let z = g.matmul(h, w_down)?;
    let z = g.add_row(z, b_down)?;
    let z = g.relu(z);
    let u = g.matmul(z, w_up)?;
    let u = g.add_row(u, b_up)?;
    g.add(h, u)
}

/// `Σ_i kron(rule_i, left_i · right_i)`.
pub fn phm_weight<T: Scalar>(g: &mut Graph<T>, rules: &[Var], left: &[Var], right: &[Var]) -> Result<Var> {
    if rules.is_empty() || rules.len() != left.len() || rules.len() != right.len() {
        return Err(Error::shape(
            "phm_weight",
            format!("{} rules, {} left factors, {} right factors", rules.len(), left.len(), right.len()),
        ));
    }
    let n = rules.len();
    let mut acc: Option<Var> = None;
    for i in 0..n {
        if g.shape(rules[i]) != (n, n) {
            return Err(Error::shape("phm_weight", format!("rule {i} is {:?}, expected {n}x{n}", g.shape(rules[i]))));
        }
        let block = g.matmul(left[i], right[i])?;
        let term = g.kron(rules[i], block)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("n >= 1"))
}

/// `x · W + bias` with `W` assembled from Kronecker products.
pub fn phm_linear<T: Scalar>(g: &mut Graph<T>, x: Var, rules: &[Var], left: &[Var], right: &[Var], bias: Var) -> Result<Var> {
    let w = phm_weight(g, rules, left, right)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

/// Column-wise rescaling of an activation stream by a learned vector.
pub fn ia3_rescale<T: Scalar>(g: &mut Graph<T>, stream: Var, l: Var) -> Result<Var> {
    g.col_scale(stream, l)
}

/// `σ(pooled · w_g)` for a `1×d` pooled input and a `d×1` gate weight.
pub fn gate_value<T: Scalar>(g: &mut Graph<T>, pooled: Var, w_g: Var) -> Result<Var> {
    let logit = g.matmul(pooled, w_g)?;
    if g.shape(logit) != (1, 1) {
        return Err(Error::shape("gate", format!("gate logit has shape {:?}", g.shape(logit))));
    }
    Ok(g.sigmoid(logit))
}

/// `base + Σ gate · contribution` over the adapter, LoRA and prefix parts.
/// Each part is `(slot, contribution, gate)`; all three slots must be present.
pub fn unipelt_gated_combine<T: Scalar>(g: &mut Graph<T>, base: Var, parts: &[(GateSlot, Var, Var)]) -> Result<Var> {
    for slot in [GateSlot::Adapter, GateSlot::Lora, GateSlot::Prefix] {
        if !parts.iter().any(|(s, _, _)| *s == slot) {
            return Err(Error::config(format!("gated combination is missing the {slot:?} sub-method")));
        }
    }
    let mut out = base;
    for (_, contribution, gate) in parts {
        let c = g.scale_by(*contribution, *gate)?;
        out = g.add(out, c)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        g.constant(&Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn scaled_prompt_forced_arithmetic() {
        let mut g = Graph::new();
        let xp = c(&mut g, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let s = c(&mut g, &[&[2.0], &[0.5]]);
        let xe = c(&mut g, &[&[9.0, 9.0]]);
        let out = compose_scaled_prompt(&mut g, xp, s, ScaleShape::Vector, xe).unwrap();
        assert_eq!(g.value(out), &[2.0, 4.0, 1.5, 2.0, 9.0, 9.0]);
    }

    #[test]
    fn ones_scale_is_bitwise_plain_prompt() {
        let mut g = Graph::<f32>::new();
        let xp = g.constant_from(2, 3, vec![0.1, -0.7, 1.3, 2.2, 0.0, -4.1]).unwrap();
        let xe = g.constant_from(1, 3, vec![5.0, 6.0, 7.0]).unwrap();
        let plain = compose_prompt(&mut g, xp, xe).unwrap();
        for (shape, (r, c)) in [(ScaleShape::Vector, (2, 1)), (ScaleShape::Scalar, (1, 1)), (ScaleShape::Matrix, (2, 3))] {
            let s = g.constant_from(r, c, vec![1.0; r * c]).unwrap();
            let scaled = compose_scaled_prompt(&mut g, xp, s, shape, xe).unwrap();
            assert_eq!(g.value(scaled), g.value(plain));
        }
        let bad = g.constant_from(3, 1, vec![1.0; 3]).unwrap();
        assert!(compose_scaled_prompt(&mut g, xp, bad, ScaleShape::Vector, xe).is_err());
    }

    #[test]
    fn empty_prompt_and_prefix_are_identity() {
        let mut g = Graph::<f64>::new();
        let xe = g.constant_from(3, 2, vec![1.0; 6]).unwrap();
        let empty = g.constant_from(0, 2, vec![]).unwrap();
        assert_eq!(compose_prompt(&mut g, empty, xe).unwrap(), xe);
        let (k, v) = prefix_kv_extend(&mut g, xe, xe, empty, empty).unwrap();
        assert_eq!((k, v), (xe, xe));
        let wide = g.constant_from(1, 3, vec![0.0; 3]).unwrap();
        assert!(compose_prompt(&mut g, wide, xe).is_err());
    }

    #[test]
    fn prefix_rows_come_first() {
        let mut g = Graph::<f64>::new();
        let k = g.constant_from(3, 2, vec![1.0; 6]).unwrap();
        let p = g.constant_from(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let (k2, _) = prefix_kv_extend(&mut g, k, k, p, p).unwrap();
        assert_eq!(g.shape(k2), (8, 2));
        assert_eq!(&g.value(k2)[..10], g.value(p));
    }

    #[test]
    fn lora_zero_b_is_exact_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant_from(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.25, -0.125]).unwrap();
        let w = g.constant_from(3, 2, vec![1.0, 2.0, -3.0, 0.5, 0.7, 0.1]).unwrap();
        let a = g.constant_from(3, 1, vec![0.4, 0.9, -0.2]).unwrap();
        let b = g.constant_from(1, 2, vec![0.0, 0.0]).unwrap();
        let y = lora_apply(&mut g, x, w, a, b, 1.0).unwrap();
        let base = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y), g.value(base));
        let bad = g.constant_from(2, 2, vec![0.0; 4]).unwrap();
        assert!(lora_apply(&mut g, x, w, a, bad, 1.0).is_err());
    }

    #[test]
    fn merge_with_zero_b_and_undo() {
        let w = Tensor::<f64>::from_fn(&[4, 3], |i| i as f64 * 0.1 - 0.5);
        let a = Tensor::<f64>::from_fn(&[4, 2], |i| (i as f64).sin());
        let b0 = Tensor::<f64>::zeros(&[2, 3]);
        assert!(lora_merge(&w, &a, &b0, 1.0).unwrap().bit_eq(&w));
        let b = Tensor::<f64>::from_fn(&[2, 3], |i| (i as f64).cos());
        let neg_a = a.map(|v| -v);
        let once = lora_merge(&w, &a, &b, 1.0).unwrap();
        let back = lora_merge(&once, &neg_a, &b, 1.0).unwrap();
        assert!(back.max_abs_diff(&w).unwrap() < 1e-6);
    }

    #[test]
    fn bottleneck_zero_up_is_identity() {
        let mut g = Graph::<f64>::new();
        let h = g.constant_from(2, 4, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
        let wd = g.constant_from(4, 2, (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let bd = g.constant_from(1, 2, vec![0.1, -0.1]).unwrap();
        let wu = g.constant_from(2, 4, vec![0.0; 8]).unwrap();
        let bu = g.constant_from(1, 4, vec![0.0; 4]).unwrap();
        let y = bottleneck_forward(&mut g, h, wd, bd, wu, bu).unwrap();
        assert_eq!(g.value(y), g.value(h));
    }

    #[test]
    fn phm_order_one_is_scaled_dense() {
        let mut g = Graph::<f64>::new();
        let rule = g.constant_from(1, 1, vec![2.0]).unwrap();
        let s = g.constant_from(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let t = g.constant_from(1, 2, vec![0.5, -1.0]).unwrap();
        let w = phm_weight(&mut g, &[rule], &[s], &[t]).unwrap();
        assert_eq!(g.value(w), &[1.0, -2.0, 2.0, -4.0, 3.0, -6.0]);
    }

    #[test]
    fn ia3_doubling_is_exact() {
        let mut g = Graph::<f32>::new();
        let a = g.constant_from(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let l = g.constant_from(3, 1, vec![2.0; 3]).unwrap();
        let y = ia3_rescale(&mut g, a, l).unwrap();
        let want: Vec<f32> = g.value(a).iter().map(|v| v * 2.0).collect();
        assert_eq!(g.value(y), want.as_slice());
        let bad = g.constant_from(2, 1, vec![1.0; 2]).unwrap();
        assert!(ia3_rescale(&mut g, a, bad).is_err());
    }

    #[test]
    fn gates_at_limits() {
        let mut g = Graph::<f64>::new();
        let pooled = g.constant_from(1, 2, vec![1.0, 1.0]).unwrap();
        let zero = g.constant_from(2, 1, vec![0.0, 0.0]).unwrap();
        let neg = g.constant_from(2, 1, vec![-20.0, -20.0]).unwrap();
        let half = gate_value(&mut g, pooled, zero).unwrap();
        assert_eq!(g.scalar(half), 0.5);
        let off = gate_value(&mut g, pooled, neg).unwrap();
        let base = g.constant_from(1, 2, vec![0.0, 0.0]).unwrap();
        let contrib = g.constant_from(1, 2, vec![3.0, -3.0]).unwrap();
        let out = unipelt_gated_combine(
            &mut g,
            base,
            &[(GateSlot::Adapter, contrib, off), (GateSlot::Lora, contrib, off), (GateSlot::Prefix, contrib, off)],
        )
        .unwrap();
        assert!(g.value(out).iter().all(|v| v.abs() < 1e-8 * 3.0 * 3.0));
        assert!(matches!(
            unipelt_gated_combine(&mut g, base, &[(GateSlot::Adapter, contrib, half)]),
            Err(Error::Config(_))
        ));
    }
}
