//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on
//! any failure.

mod common;

use std::time::{Duration, Instant};

use modaltune_core::adapter::{
    AdapterConfig, AdapterState, ForwardOptions, TASK_GENERAL, TASK_SUBTYPE, TASK_SURVIVAL,
};
use modaltune_core::data::{block_pathway_map, Split};
use modaltune_core::encoder::{AttentionMode, EncoderConfig, FeatureBag, SlideEncoder};
use modaltune_core::eval::{
    balanced_accuracy, concordance_index, fit_cph, integrated_gradients_graded, kaplan_meier, log_rank,
    model_integrated_gradients, write_metrics, SurvivalData, MODEL_IG_GRADING,
};
use modaltune_core::modal::{ModalConfig, ModalInputs, PathwayMap};
use modaltune_core::numerics::rng::seeded;
use modaltune_core::numerics::{
    check_graph, check_store, grad_check, AttentionParams, Dropout, GradCheckOptions, GradReport, Graph, LayerNorm, Linear,
    MlpBlock, ParamStore, Real, StoreKind, Tensor2D, Var,
};
use modaltune_core::pipeline::{
    generate_ood, generate_sites, ood_protocol, probe_text_embeddings, run_pipeline, PipelineOutput, RunConfig,
    TextProbeTask,
};
use modaltune_core::text::{max_distortion, Projector};
use modaltune_core::train::kl_alignment_loss;
use rand::Rng;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn print(line: &Line) {
    println!(
        "criterion {:>2} {} {}: {} [{:.1} s]",
        line.id,
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.detail,
        line.elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- 1

fn random_bag(rng: &mut impl Rng, n: usize, d_img: usize) -> FeatureBag {
    let t = Tensor2D::from_fn(n, d_img, |_, _| rng.random_range(-1.0f32..1.0));
    FeatureBag::new("x", t).unwrap()
}

fn random_inputs(rng: &mut impl Rng, n_genes: usize) -> ModalInputs {
    ModalInputs {
        expression: (0..n_genes).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        clinical: None,
    }
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let enc_cfg = EncoderConfig::desk();
    let modal = ModalConfig::desk();
    let map = block_pathway_map(200, 20).unwrap();
    let mut rng = seeded(1, "gamma-zero");
    let mut same = 0;
    for k in 0..20u64 {
        let enc = SlideEncoder::<f32>::init_frozen(&enc_cfg, 100 + k).unwrap();
        let adapter = AdapterState::<f32>::new(&enc_cfg, &modal, map.clone(), &AdapterConfig::desk(), 200 + k).unwrap();
        let n = rng.random_range(1..=64);
        let bag = random_bag(&mut rng, n, enc_cfg.d_img);
        let inputs = random_inputs(&mut rng, 200);
        let reference = enc.cls_embedding(&bag).unwrap();
        let bitwise = (1..=adapter.n_tasks()).all(|j| {
            let out = adapter.evaluate(&enc, &bag, &inputs, j).unwrap();
            out.z_img.len() == reference.len()
                && out.z_img.iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        same += usize::from(bitwise);
    }
    let elapsed = t.elapsed();
    Line {
        id: 1,
        name: "gamma-zero identity",
        pass: same == 20 && within(elapsed, 10.0),
        detail: format!("{same}/20 instances bitwise equal to the frozen CLS (limit 10 s)"),
        elapsed,
    }
}

// ---------------------------------------------------------------- 2

fn rand_t<T: Real>(rows: usize, cols: usize, seed: u64) -> Tensor2D<T> {
    let mut r = seeded(seed, "grad-suite");
    Tensor2D::from_fn(rows, cols, |_, _| T::lit(r.random_range(-1.0..1.0)))
}

fn readout<T: Real>(g: &mut Graph<'_, T>, y: Var) -> modaltune_core::Result<Var> {
    let (r, c) = g.shape(y);
    let w = g.constant(Tensor2D::from_fn(r, c, |i, j| T::lit(((i * 7 + j * 3) as f64 * 0.37).sin())));
    let m = g.mul(y, w)?;
    Ok(g.sum_all(m))
}

type OpCase<T> = (&'static str, Vec<Tensor2D<T>>, Box<dyn for<'g> Fn(&mut Graph<'g, T>, &[Var]) -> modaltune_core::Result<Var>>);

fn op_cases<T: Real>() -> Vec<OpCase<T>> {
    let mask = std::sync::Arc::new(vec![
        true, false, true, true, true, true, true, true, false, false, false, true, true, true, true,
    ]);
    vec![
        ("matmul", vec![rand_t(3, 4, 1), rand_t(4, 2, 2)], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y) })),
        ("matmul_nt", vec![rand_t(3, 4, 1), rand_t(5, 4, 2)], Box::new(|g, v| { let y = g.matmul_nt(v[0], v[1])?; readout(g, y) })),
        ("transpose", vec![rand_t(3, 4, 3)], Box::new(|g, v| { let y = g.transpose(v[0]); readout(g, y) })),
        ("add", vec![rand_t(3, 4, 4), rand_t(3, 4, 5)], Box::new(|g, v| { let y = g.add(v[0], v[1])?; readout(g, y) })),
        ("add_row", vec![rand_t(3, 4, 6), rand_t(1, 4, 7)], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; readout(g, y) })),
        ("add_col", vec![rand_t(3, 4, 8), rand_t(3, 1, 9)], Box::new(|g, v| { let y = g.add_col(v[0], v[1])?; readout(g, y) })),
        ("mul", vec![rand_t(3, 4, 10), rand_t(3, 4, 11)], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; readout(g, y) })),
        ("mul_row", vec![rand_t(3, 4, 12), rand_t(1, 4, 13)], Box::new(|g, v| { let y = g.mul_row(v[0], v[1])?; readout(g, y) })),
        ("scale", vec![rand_t(3, 4, 14)], Box::new(|g, v| { let y = g.scale(v[0], T::lit(-1.7)); readout(g, y) })),
        ("reshape", vec![rand_t(3, 4, 15)], Box::new(|g, v| { let y = g.reshape(v[0], 2, 6)?; readout(g, y) })),
        ("concat_rows", vec![rand_t(3, 4, 16), rand_t(2, 4, 17)], Box::new(|g, v| { let y = g.concat_rows(&[v[0], v[1]])?; readout(g, y) })),
        ("concat_cols", vec![rand_t(3, 4, 18), rand_t(3, 2, 19)], Box::new(|g, v| { let y = g.concat_cols(&[v[0], v[1]])?; readout(g, y) })),
        ("slice_rows", vec![rand_t(5, 4, 20)], Box::new(|g, v| { let y = g.slice_rows(v[0], 1, 3)?; readout(g, y) })),
        ("slice_cols", vec![rand_t(3, 6, 21)], Box::new(|g, v| { let y = g.slice_cols(v[0], 2, 3)?; readout(g, y) })),
        ("mean_rows", vec![rand_t(4, 3, 22)], Box::new(|g, v| { let y = g.mean_rows(v[0]); readout(g, y) })),
        ("sum_all", vec![rand_t(4, 3, 23)], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; Ok(g.sum_all(y)) })),
        ("softmax_rows", vec![rand_t(3, 5, 24)], Box::new(|g, v| { let y = g.softmax_rows(v[0], None)?; readout(g, y) })),
        ("masked_softmax_rows", vec![rand_t(3, 5, 25)], Box::new(move |g, v| { let y = g.softmax_rows(v[0], Some(&mask))?; readout(g, y) })),
        ("layer_norm", vec![rand_t(3, 5, 26), rand_t(1, 5, 27), rand_t(1, 5, 28)], Box::new(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; readout(g, y) })),
        ("gelu", vec![rand_t::<T>(3, 5, 29).map(|x| x * T::lit(3.0))], Box::new(|g, v| { let y = g.gelu(v[0]); readout(g, y) })),
        ("l2_normalize_rows", vec![rand_t(3, 5, 30)], Box::new(|g, v| { let y = g.l2_normalize_rows(v[0])?; readout(g, y) })),
        ("kl_softmax_rows", vec![rand_t(3, 6, 31), rand_t(3, 6, 32)], Box::new(|g, v| g.kl_softmax_rows(v[0], v[1]))),
        ("cross_entropy", vec![rand_t(1, 5, 33)], Box::new(|g, v| g.cross_entropy(v[0], 2))),
        ("discrete_survival_nll", vec![rand_t(1, 4, 34)], Box::new(|g, v| {
            let a = g.discrete_survival_nll(v[0], 1, true)?;
            let b = g.discrete_survival_nll(v[0], 2, false)?;
            g.add(a, b)
        })),
    ]
}

fn layer_reports<T: Real>(opts: GradCheckOptions) -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let mut rng = seeded(9, "layers");
    let mut s = ParamStore::<T>::new(StoreKind::Trainable);
    let lin = Linear::new(&mut s, "lin", 8, 5, true, &mut rng);
    let ln = LayerNorm::new(&mut s, "ln", 5);
    let mlp = MlpBlock::new(&mut s, "mlp", 5, 2.0, 8, 0.0, &mut rng).unwrap();
    let att = AttentionParams::new(&mut s, "att", 8, 2, 0.5, &mut rng).unwrap();
    let x = s.add("x", rand_t(4, 8, 40));
    let kv = s.add("kv", rand_t(3, 8, 41));
    let rep = check_store(&s, opts, |st, want| {
        let mut g = Graph::new();
        let xv = g.param(st, x);
        let kvv = g.param(st, kv);
        let h = lin.forward(&mut g, st, xv)?;
        let h = ln.forward(&mut g, st, h)?;
        let h = mlp.forward(&mut g, st, h, Dropout::eval())?;
        let a = att.forward(&mut g, st, h, kvv, None)?;
        let l = readout(&mut g, a.out)?;
        let v = g.value(l).get(0, 0);
        let grads = want.then(|| g.backward(l).map(|gr| gr.param_grads(&g, st)));
        Ok((v, grads.transpose()?))
    })
    .unwrap();
    out.push(("linear+layer_norm+mlp+attention", rep));
    out
}

fn toy_encoder(mode: AttentionMode) -> EncoderConfig {
    EncoderConfig {
        d_img: 6,
        d: 8,
        layers: 2,
        blocks: 2,
        n_heads: 2,
        ff_dim: 16,
        attention_mode: mode,
        segment_lengths: vec![2, 4],
        dilation_ratios: vec![1, 2],
    }
}

fn toy_map() -> PathwayMap {
    block_pathway_map(8, 4).unwrap()
}

fn toy_modal() -> ModalConfig {
    ModalConfig {
        d_gp: 4,
        n_tokens: 2,
        mixer_layers: 1,
        ..ModalConfig::desk()
    }
}

struct Toy<T> {
    enc: SlideEncoder<T>,
    adapter: AdapterState<T>,
    bag: FeatureBag,
    inputs: ModalInputs,
    targets: Vec<Vec<f32>>,
}

/// Adapter on 4 patches / 4 pathways / 3 tasks with nonzero gammas and
/// projected text targets.
fn toy(mode: AttentionMode) -> Toy<f32> {
    let enc = SlideEncoder::<f32>::init_frozen(&toy_encoder(mode), 3).unwrap();
    let acfg = AdapterConfig {
        n_heads: 2,
        d_final: 6,
        ..AdapterConfig::desk()
    };
    let mut adapter = AdapterState::<f32>::new(enc.config(), &toy_modal(), toy_map(), &acfg, 4).unwrap();
    for id in adapter.gamma_ids() {
        let g = adapter.store().get(id).clone();
        *adapter.store_mut().get_mut(id) = Tensor2D::from_fn(g.rows(), g.cols(), |_, j| 0.3 - 0.05 * j as f32);
    }
    let mut rng = seeded(5, "e2e");
    let bag = random_bag(&mut rng, 4, 6);
    let inputs = random_inputs(&mut rng, 8);
    let projector = Projector::new(10, 6, 7);
    let targets = (0..3)
        .map(|j| projector.project(&(0..10).map(|k| ((j * 10 + k) as f32 * 0.61).cos()).collect::<Vec<_>>()).unwrap())
        .collect();
    Toy { enc, adapter, bag, inputs, targets }
}

/// The same model with every weight widened to f64.
fn widen(t: &Toy<f32>) -> Toy<f64> {
    let cast = |named: Vec<(String, Tensor2D<f32>)>| -> Vec<(String, Tensor2D<f64>)> {
        named.into_iter().map(|(n, v)| (n, v.cast())).collect()
    };
    let mut enc = SlideEncoder::<f64>::init_frozen(t.enc.config(), 3).unwrap();
    enc.load_weights(&cast(t.enc.store().named_tensors())).unwrap();
    let mut adapter =
        AdapterState::<f64>::new(t.enc.config(), &toy_modal(), toy_map(), t.adapter.config(), 4).unwrap();
    adapter.store_mut().load_from(&cast(t.adapter.store().named_tensors())).unwrap();
    Toy {
        enc,
        adapter,
        bag: t.bag.clone(),
        inputs: t.inputs.clone(),
        targets: t.targets.clone(),
    }
}

/// KL alignment loss of all three task outputs, with gradients on request.
fn toy_loss<T: Real>(
    t: &Toy<T>,
    store: &ParamStore<T>,
    want: bool,
) -> modaltune_core::Result<(T, Option<modaltune_core::numerics::ParamGrads<T>>)> {
    let mut probe = t.adapter.clone();
    *probe.store_mut() = store.clone();
    let mut g = Graph::new();
    let tasks = [TASK_GENERAL, TASK_SURVIVAL, TASK_SUBTYPE];
    let vars = probe.forward(&mut g, &t.enc, &t.bag, &t.inputs, &tasks, None, ForwardOptions::eval())?;
    let z: Vec<Var> = vars.iter().map(|v| v.output).collect();
    let y: Vec<Var> = t
        .targets
        .iter()
        .map(|v| g.constant(Tensor2D::row_vector(v.iter().map(|&x| T::lit(f64::from(x))).collect())))
        .collect();
    let loss = kl_alignment_loss(&mut g, &z, &y, 1.0)?;
    let value = g.value(loss).get(0, 0);
    if !want {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    Ok((value, Some(grads.param_grads(&g, probe.store()))))
}

/// End-to-end check in f64 by central differences.
fn end_to_end_f64(mode: AttentionMode) -> GradReport {
    let t = widen(&toy(mode));
    check_store(t.adapter.store(), GradCheckOptions::f64(), |s, want| toy_loss(&t, s, want)).unwrap()
}

/// End-to-end check of the f32 backward pass. The reference derivative is
/// taken by f64 central differences at the same (f32-representable) weights,
/// since no f32 step size keeps both truncation and rounding below 1e-3 on
/// this composite.
fn end_to_end_f32(mode: AttentionMode) -> GradReport {
    let t32 = toy(mode);
    let t64 = widen(&t32);
    let (_, grads) = toy_loss(&t32, t32.adapter.store(), true).unwrap();
    let grads = grads.unwrap();
    let store = t32.adapter.store();
    let params: Vec<Tensor2D<f64>> = store.iter().map(|(_, _, v)| v.cast()).collect();
    let analytic: Vec<Tensor2D<f64>> = store
        .iter()
        .map(|(id, _, v)| grads.get(id).map_or_else(|| Tensor2D::zeros(v.rows(), v.cols()), |g| g.cast()))
        .collect();
    let mut scratch = t64.adapter.store().clone();
    let ids: Vec<_> = scratch.ids().collect();
    let opts = GradCheckOptions {
        floor: GradCheckOptions::f32().floor,
        ..GradCheckOptions::f64()
    };
    grad_check(&params, &analytic, opts, |p| {
        for (&id, v) in ids.iter().zip(p) {
            *scratch.get_mut(id) = v.clone();
        }
        toy_loss(&t64, &scratch, false).map(|(v, _)| v)
    })
    .unwrap()
}

fn criterion_2() -> Line {
    let t = Instant::now();
    let mut worst64: (f64, &str) = (0.0, "");
    let mut worst32: (f64, &str) = (0.0, "");
    let mut checked = 0;
    for (name, inputs, build) in op_cases::<f64>() {
        let r = check_graph(&inputs, GradCheckOptions::f64(), |g, v| build(g, v)).unwrap();
        checked += 1;
        if r.max_rel_err >= worst64.0 {
            worst64 = (r.max_rel_err, name);
        }
    }
    for (name, inputs, build) in op_cases::<f32>() {
        let r = check_graph(&inputs, GradCheckOptions::f32(), |g, v| build(g, v)).unwrap();
        checked += 1;
        if r.max_rel_err >= worst32.0 {
            worst32 = (r.max_rel_err, name);
        }
    }
    for (name, r) in layer_reports::<f64>(GradCheckOptions::f64()) {
        checked += 1;
        if r.max_rel_err >= worst64.0 {
            worst64 = (r.max_rel_err, name);
        }
    }
    for (name, r) in layer_reports::<f32>(GradCheckOptions::f32()) {
        checked += 1;
        if r.max_rel_err >= worst32.0 {
            worst32 = (r.max_rel_err, name);
        }
    }
    let e2e64 = [AttentionMode::Dense, AttentionMode::Dilated].map(|m| end_to_end_f64(m).max_rel_err);
    let e2e32 = [AttentionMode::Dense, AttentionMode::Dilated].map(|m| end_to_end_f32(m).max_rel_err);
    let e64 = e2e64.iter().copied().fold(0.0, f64::max);
    let e32 = e2e32.iter().copied().fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = worst64.0 < 1e-6 && worst32.0 < 1e-3 && e64 < 1e-6 && e32 < 1e-3 && within(elapsed, 120.0);
    Line {
        id: 2,
        name: "gradient suite",
        pass,
        detail: format!(
            "{checked} op/layer checks, worst f64 {:.1e} ({}), worst f32 {:.1e} ({}); end-to-end loss f64 {e64:.1e}, f32 {e32:.1e} (limits 1e-6 / 1e-3, 120 s)",
            worst64.0, worst64.1, worst32.0, worst32.1
        ),
        elapsed,
    }
}

// ---------------------------------------------------------------- 3

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let mut rng = seeded(3, "metric-oracles");
    let mut mismatches = Vec::new();
    let mut degenerate_agree = 0;
    for inst in 0..100 {
        let n = rng.random_range(2..=12);
        let (time, event) = common::tied_survival(&mut rng, n);
        let risk: Vec<i64> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let surv = SurvivalData::new(time.iter().map(|&v| v as f64).collect(), event.clone()).unwrap();

        let risk_f: Vec<f64> = risk.iter().map(|&v| v as f64).collect();
        match (concordance_index(&risk_f, &surv), common::concordance(&risk, &time, &event)) {
            (Ok(c), Some(o)) if close(c, common::to_f64(o)) => {}
            (Err(_), None) => degenerate_agree += 1,
            other => mismatches.push(format!("c-index instance {inst}: {other:?}")),
        }

        let k = rng.random_range(2..=4);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        match (balanced_accuracy(&truth, &pred), common::balanced_accuracy(&truth, &pred)) {
            (Ok(b), Some(o)) if close(b, common::to_f64(o)) => {}
            other => mismatches.push(format!("balanced accuracy instance {inst}: {other:?}")),
        }

        let km = kaplan_meier(&surv, &vec![true; n]).unwrap();
        for probe_t in 0..=7 {
            let o = common::to_f64(common::km_at(&time, &event, probe_t));
            if !close(km.at(probe_t as f64), o) {
                mismatches.push(format!("km instance {inst} at {probe_t}: {} vs {o}", km.at(probe_t as f64)));
            }
        }

        let mut group: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        group[0] = true;
        group[n - 1] = false;
        match (log_rank(&surv, &group), common::log_rank_statistic(&time, &event, &group)) {
            (Ok(lr), Some(o)) if close(lr.statistic, common::to_f64(o)) => {}
            (Ok(lr), None) if lr.statistic == 0.0 => {}
            (Err(_), None) if !event.iter().any(|&e| e) => degenerate_agree += 1,
            other => mismatches.push(format!("log-rank instance {inst}: {other:?}")),
        }
    }
    let elapsed = t.elapsed();
    Line {
        id: 3,
        name: "metric oracles",
        pass: mismatches.is_empty() && within(elapsed, 30.0),
        detail: if mismatches.is_empty() {
            format!("100 instances (n <= 12), C-index/BA/KM/log-rank equal to exact rational oracles to 1e-12; {degenerate_agree} degenerate cases rejected by both (limit 30 s)")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
        elapsed,
    }
}

// ---------------------------------------------------------------- 4

fn penalized(x: &[Vec<f64>], time: &[f64], event: &[bool], beta: &[f64], pen: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let (ll, g) = common::breslow(x, time, event, beta);
    let obj = ll / n - pen * beta.iter().map(|b| b * b).sum::<f64>();
    let grad = g.iter().zip(beta).map(|(gk, b)| gk / n - 2.0 * pen * b).collect();
    (obj, grad)
}

fn criterion_4() -> Line {
    let t = Instant::now();
    let mut rng = seeded(4, "cph");
    let mut worst_grad: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(30..80);
        let p = rng.random_range(1..5);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let time: Vec<f64> = (0..n).map(|_| (rng.random_range(1..40) as f64) / 2.0).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let surv = SurvivalData::new(time.clone(), event.clone()).unwrap();
        let m = fit_cph(&x, &surv, 0.1).unwrap();
        let (_, g) = penalized(&x, &time, &event, &m.beta, 0.1);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(norm).max(m.grad_norm);
    }

    // binary covariate, group 1 fails strictly earlier
    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![f64::from(u8::from(i < 6))]).collect();
    let time: Vec<f64> = (0..12).map(|i| if i < 6 { 1.0 + i as f64 } else { 10.0 + i as f64 }).collect();
    let event: Vec<bool> = (0..12).map(|i| i % 5 != 4).collect();
    let surv = SurvivalData::new(time.clone(), event.clone()).unwrap();
    let m = fit_cph(&x, &surv, 0.1).unwrap();
    let f = |b: f64| penalized(&x, &time, &event, &[b], 0.1).0;
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut b = -10.0;
    while b <= 10.0 {
        let v = f(b);
        if v > best.0 {
            best = (v, b);
        }
        b += 1e-3;
    }
    let (mut lo, mut hi) = (best.1 - 2e-3, best.1 + 2e-3);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let c = lo + phi * (hi - lo);
        if f(a) > f(c) {
            hi = c;
        } else {
            lo = a;
        }
    }
    let oracle = (lo + hi) / 2.0;
    let diff = (m.beta[0] - oracle).abs();
    let elapsed = t.elapsed();
    Line {
        id: 4,
        name: "CPH correctness",
        pass: worst_grad < 1e-6 && diff < 1e-3 && m.beta[0] > 0.0 && within(elapsed, 30.0),
        detail: format!(
            "worst penalized-gradient norm {worst_grad:.1e} over 10 fits; binary case beta {:.6} vs grid oracle {oracle:.6} (|diff| {diff:.1e}; limits 1e-6, 1e-3, 30 s)",
            m.beta[0]
        ),
        elapsed,
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5(cfg: &RunConfig, multi: &PipelineOutput, sites: &[modaltune_core::pipeline::SiteData]) -> Line {
    let t = Instant::now();
    let enc = cfg.frozen_encoder().unwrap();
    let site = &sites[0];
    let model = &multi.models[0].adapter;
    let readout = &multi.results[0].readout;
    let test = site.patients(Split::Test).unwrap();
    let mut worst: f64 = 0.0;
    for p in test.iter().take(3) {
        let ig = model_integrated_gradients(&enc, model, &p.bag, &p.inputs, readout, 256).unwrap();
        let delta = ig.f_input - ig.f_baseline;
        worst = worst.max((ig.total() - delta).abs() / delta.abs().max(1e-12));
    }
    let w: Vec<f64> = (0..16).map(|k| (k as f64 * 0.9).sin()).collect();
    let x: Vec<f64> = (0..16).map(|k| (k as f64 * 0.4).cos()).collect();
    let base = vec![0.25; 16];
    let lin = integrated_gradients_graded(&x, &base, 256, MODEL_IG_GRADING, |z| {
        Ok((z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5, w.clone()))
    })
    .unwrap();
    let lin_err = (lin.total() - (lin.f_input - lin.f_baseline)).abs();
    let elapsed = t.elapsed();
    Line {
        id: 5,
        name: "IG completeness",
        pass: worst < 0.01 && lin_err < 1e-8 && within(elapsed, 60.0),
        detail: format!(
            "trained adapter, 256 steps, 3 {} test patients: worst relative gap {worst:.2e}; linear surrogate gap {lin_err:.1e} (limits 1%, 1e-8, 60 s)",
            site.site()
        ),
        elapsed,
    }
}

// ---------------------------------------------------------------- 6

fn criterion_6(multi: &PipelineOutput, single: &PipelineOutput, elapsed: Duration) -> Line {
    let mut pass = within(elapsed, 600.0);
    let mut parts = Vec::new();
    for (m, s) in multi.results.iter().zip(&single.results) {
        let ok = m.balanced_accuracy >= 0.90
            && m.c_index >= 0.70
            && m.balanced_accuracy > s.balanced_accuracy
            && m.c_index > s.c_index;
        pass &= ok;
        parts.push(format!(
            "{}: BA {:.3} (single {:.3}), C {:.3} (single {:.3})",
            m.site, m.balanced_accuracy, s.balanced_accuracy, m.c_index, s.c_index
        ));
    }
    Line {
        id: 6,
        name: "planted-signal end-to-end",
        pass,
        detail: format!("{} (targets BA >= 0.90, C >= 0.70, multi > single; ~10 CPU-min)", parts.join("; ")),
        elapsed,
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7(cfg: &RunConfig, sites: &[modaltune_core::pipeline::SiteData]) -> (Line, PipelineOutput) {
    let t = Instant::now();
    let mut pooled_cfg = cfg.clone();
    pooled_cfg.train.pan_cancer = true;
    let pooled = run_pipeline(&pooled_cfg, sites, None).unwrap();
    let ood = generate_ood(&pooled_cfg).unwrap().expect("config has an OOD site");
    let enc = pooled_cfg.frozen_encoder().unwrap();
    let r = ood_protocol(&enc, &pooled.models[0].adapter, &ood, pooled_cfg.cph_penalizer).unwrap();
    let leaked = pooled.models[0]
        .run
        .access_log
        .iter()
        .filter(|id| ood.cohort.index().contains_key(id.as_str()))
        .count();
    let gain = r.balanced_accuracy - r.majority_balanced_accuracy;
    let elapsed = t.elapsed();
    let pooled_sites: Vec<String> = pooled
        .results
        .iter()
        .map(|s| format!("{} BA {:.3} C {:.3}", s.site, s.balanced_accuracy, s.c_index))
        .collect();
    (
        Line {
            id: 7,
            name: "pan-cancer + OOD",
            pass: gain >= 0.10 && leaked == 0 && within(elapsed, 900.0),
            detail: format!(
                "pooled over {} sites ({}); OOD {} BA {:.3} vs majority {:.3} (gain {gain:.3}, need >= 0.10), {leaked} OOD reads during tuning (limit 15 min)",
                sites.len(),
                pooled_sites.join(", "),
                ood.site(),
                r.balanced_accuracy,
                r.majority_balanced_accuracy
            ),
            elapsed,
        },
        pooled,
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9(cfg: &RunConfig, sites: &[modaltune_core::pipeline::SiteData]) -> Line {
    let t = Instant::now();
    let mut rng = seeded(9, "jl");
    let vecs: Vec<Vec<f32>> = (0..200)
        .map(|_| {
            let v: Vec<f64> = (0..512).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect();
    let projector = Projector::new(512, 256, cfg.text.projector_seed);
    let projected: Vec<Vec<f32>> = vecs.iter().map(|v| projector.project(v).unwrap()).collect();
    let distortion = max_distortion(&vecs, &projected);
    let text = cfg.text_encoder().unwrap();
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    let mut raw_scores = Vec::new();
    for s in sites {
        let raw = probe_text_embeddings(s, cfg, text.as_ref(), TextProbeTask::Subtype, None).unwrap();
        let proj = probe_text_embeddings(s, cfg, text.as_ref(), TextProbeTask::Subtype, Some(&projector)).unwrap();
        worst_drop = worst_drop.max(raw - proj);
        raw_scores.push(format!("{} {raw:.3} -> {proj:.3}", s.site()));
    }
    let elapsed = t.elapsed();
    Line {
        id: 9,
        name: "projector JL property",
        pass: distortion < 0.5 && worst_drop < 0.01,
        detail: format!(
            "512 -> 256 max pairwise distortion {distortion:.3} over 200 unit vectors (limit 0.5); subtype text probe BA {} (worst drop {worst_drop:.3}, limit 0.01)",
            raw_scores.join(", ")
        ),
        elapsed,
    }
}

// ---------------------------------------------------------------- 10

fn metrics_bytes(out: &PipelineOutput, dir: &std::path::Path, name: &str) -> Vec<u8> {
    let p = dir.join(name);
    write_metrics(&p, &out.metrics).unwrap();
    std::fs::read(&p).unwrap()
}

fn main() {
    let mut lines = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4] {
        let l = f();
        print(&l);
        lines.push(l);
    }

    let cfg = RunConfig::desk();
    let sites = generate_sites(&cfg).unwrap();
    let t = Instant::now();
    let multi = run_pipeline(&cfg, &sites, None).unwrap();
    let single = run_pipeline(&cfg.single_modal(), &sites, None).unwrap();
    let c6_time = t.elapsed();

    let l5 = criterion_5(&cfg, &multi, &sites);
    print(&l5);
    let l6 = criterion_6(&multi, &single, c6_time);
    print(&l6);
    let (l7, pooled) = criterion_7(&cfg, &sites);
    print(&l7);

    let t = Instant::now();
    let repeat = run_pipeline(&cfg, &sites, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = metrics_bytes(&multi, dir.path(), "first.csv");
    let b = metrics_bytes(&repeat, dir.path(), "second.csv");
    let l10 = Line {
        id: 10,
        name: "determinism",
        pass: a == b && !a.is_empty(),
        detail: format!("two identical-config pipeline runs: metric CSVs of {} bytes {}", a.len(), if a == b { "byte-identical" } else { "differ" }),
        elapsed: t.elapsed(),
    };

    let runs: [(&str, &PipelineOutput); 4] = [("multi-modal", &multi), ("single-modal", &single), ("pooled", &pooled), ("repeat", &repeat)];
    let frozen_ok: Vec<String> = runs
        .iter()
        .map(|(n, o)| format!("{n} {}", if o.frozen_digest_before == o.frozen_digest_after { "unchanged" } else { "CHANGED" }))
        .collect();
    let l8 = Line {
        id: 8,
        name: "frozen contract",
        pass: runs.iter().all(|(_, o)| o.frozen_digest_before == o.frozen_digest_after),
        detail: format!("frozen-weight digest before/after each training run: {}", frozen_ok.join(", ")),
        elapsed: Duration::ZERO,
    };
    print(&l8);
    let l9 = criterion_9(&cfg, &sites);
    print(&l9);
    print(&l10);
    lines.extend([l5, l6, l7, l8, l9, l10]);

    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
