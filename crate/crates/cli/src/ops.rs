//! Subcommand bodies. Each returns a phase-tagged error so main can map
//! argument, file, and computation failures to distinct exit codes.

use std::time::Instant;

use gbdomain::discover::{
    align_labels, discover_with, reduce_descriptors, suggest_k, DiscoverOptions,
    PseudoDomainAssignment,
};
use gbdomain::evalsynth::{
    adjusted_rand_index, apply_drift, count_stratification, generate_mixture, label_churn,
    DomainSpec, SynthSpec,
};
use gbdomain::featstats::{
    load_descriptors, save_descriptors_binary, save_descriptors_csv, DescriptorSet,
};
use gbdomain::gbdivide::{divide, DivisionParams};
use gbdomain::losses::{
    evaluate_losses, loss_den, loss_orth, loss_sem, loss_sty, max_rel_grad_error, BranchBatch,
    LossWeights, ORTH_EPS,
};
use gbdomain::pca::default_dim;
use ndarray::{Array2, Array3};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::files::{
    ensure_dir, load_assignment, now_unix, read_text, tau_value, write_assignment, write_bytes,
    write_json, CmdError, CmdResult, PhaseExt,
};
use crate::{
    AlignArgs, BenchArgs, DescFormat, DiscoverArgs, DivisionFlags, EvalArgs, LossesArgs, SynthArgs,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-4;

fn load_ds(path: &std::path::Path) -> CmdResult<DescriptorSet> {
    load_descriptors(path).map_err(|e| CmdError::file(format!("{}: {}", path.display(), e)))
}

fn division_params(flags: &DivisionFlags, rng_seed: u64) -> CmdResult<DivisionParams> {
    if flags.tau.is_nan() || flags.tau < 0.0 {
        return Err(CmdError::args("tau must be >= 0"));
    }
    if !flags.beta.is_finite() || flags.beta <= 1.0 {
        return Err(CmdError::args("beta must be > 1"));
    }
    if !flags.eps.is_finite() || flags.eps <= 0.0 {
        return Err(CmdError::args("eps must be > 0"));
    }
    if flags.min_ball < 2 {
        return Err(CmdError::args("min-ball must be >= 2"));
    }
    Ok(DivisionParams {
        tau: flags.tau,
        beta: flags.beta,
        eps: flags.eps,
        d_max: flags.dmax,
        min_ball: flags.min_ball,
        rng_seed,
    })
}

fn division_config(div: &DivisionParams) -> Value {
    json!({
        "tau": tau_value(div.tau),
        "beta": div.beta,
        "eps": div.eps,
        "dmax": div.d_max,
        "min_ball": div.min_ball,
    })
}

fn dataset_preset(tag: &str) -> CmdResult<usize> {
    match tag.to_ascii_lowercase().as_str() {
        "sha" => Ok(4),
        "shb" => Ok(3),
        "qnrf" => Ok(6),
        "sha+shb" | "shb+sha" => Ok(5),
        other => Err(CmdError::args(format!(
            "unknown dataset tag {other:?}; expected sha, shb, qnrf, or sha+shb"
        ))),
    }
}

fn resolve_k(args: &DiscoverArgs, n: usize) -> CmdResult<usize> {
    let sources =
        args.k.is_some() as u8 + args.k_auto as u8 + args.dataset.is_some() as u8;
    if sources == 0 {
        return Err(CmdError::args("one of --k, --k-auto, or --dataset is required"));
    }
    if sources > 1 {
        return Err(CmdError::args("--k, --k-auto, and --dataset are mutually exclusive"));
    }
    if let Some(k) = args.k {
        if k == 0 {
            return Err(CmdError::args("--k must be >= 1"));
        }
        return Ok(k);
    }
    if let Some(tag) = &args.dataset {
        return dataset_preset(tag);
    }
    if n == 0 {
        return Err(CmdError::compute("cannot choose K for an empty dataset"));
    }
    Ok((suggest_k(n).0.round() as usize).max(1))
}

pub fn discover(args: DiscoverArgs) -> CmdResult<()> {
    let div = division_params(&args.division, args.seed)?;
    if matches!(args.pca_d, Some(0)) {
        return Err(CmdError::args("--pca-d must be >= 1"));
    }
    let ds = load_ds(&args.input)?;
    if ds.len() == 0 {
        return Err(CmdError::compute("input holds no samples"));
    }
    let k = resolve_k(&args, ds.len())?;
    let pca_d = args.pca_d.unwrap_or_else(|| default_dim(ds.len(), ds.dim()));
    let prev = match &args.prev {
        Some(p) => Some(load_assignment(p)?),
        None => None,
    };
    let opts = DiscoverOptions {
        size_weighted_centers: args.size_weighted,
    };
    let assignment = discover_with(
        &ds,
        k,
        pca_d,
        &div,
        args.seed,
        prev.as_ref().map(|(_, a)| a),
        &opts,
    )
    .compute_phase()?;
    let ids: Vec<String> = ds.descriptors().iter().map(|d| d.sample_id.clone()).collect();
    let mut config = division_config(&div);
    let obj = config.as_object_mut().unwrap();
    obj.insert("command".into(), json!("discover"));
    obj.insert("input".into(), json!(args.input.display().to_string()));
    obj.insert("k".into(), json!(k));
    obj.insert("k_auto".into(), json!(args.k_auto));
    obj.insert("dataset".into(), json!(args.dataset));
    obj.insert("pca_d".into(), json!(pca_d));
    obj.insert("seed".into(), json!(args.seed));
    obj.insert(
        "prev".into(),
        json!(args.prev.as_ref().map(|p| p.display().to_string())),
    );
    obj.insert("size_weighted".into(), json!(args.size_weighted));
    obj.insert("threads".into(), json!(rayon::current_num_threads()));
    let stamp = (!args.no_timestamp).then(now_unix);
    write_assignment(&args.out, &assignment, &ids, config, stamp)?;
    if args.emit_balls {
        let reduced = reduce_descriptors(&ds, pca_d).compute_phase()?;
        let balls = divide(reduced.view(), &div).compute_phase()?;
        let value = serde_json::to_value(&balls).compute_phase()?;
        write_json(&args.out.join("balls.json"), &value)?;
    }
    println!(
        "wrote {} ({} samples, K={}, epoch {})",
        args.out.join("labels.csv").display(),
        assignment.labels.len(),
        assignment.k,
        assignment.epoch
    );
    Ok(())
}

pub fn align(args: AlignArgs) -> CmdResult<()> {
    let (ids, current) = load_assignment(&args.input)?;
    let (_, prev) = load_assignment(&args.prev)?;
    let aligned = align_labels(&current, &prev).compute_phase()?;
    let permutation = aligned
        .permutation_applied
        .clone()
        .expect("alignment always records its permutation");
    let config = json!({
        "command": "align",
        "input": args.input.display().to_string(),
        "prev": args.prev.display().to_string(),
    });
    let stamp = (!args.no_timestamp).then(now_unix);
    write_assignment(&args.out, &aligned, &ids, config.clone(), stamp)?;
    let csv = gbdomain::discover::assignment_to_csv(&aligned, &ids).compute_phase()?;
    write_bytes(&args.out.join("aligned.csv"), csv.as_bytes())?;
    let mut perm_doc = json!({
        "K": aligned.k,
        "permutation": permutation,
        "config": config,
    });
    if let Some(ts) = stamp {
        perm_doc
            .as_object_mut()
            .unwrap()
            .insert("timestamp".into(), json!(ts));
    }
    write_json(&args.out.join("permutation.json"), &perm_doc)?;
    println!(
        "wrote {} (permutation {:?})",
        args.out.join("aligned.csv").display(),
        aligned.permutation_applied.as_deref().unwrap_or(&[])
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> CmdResult<()> {
    let ds = load_ds(&args.input)?;
    let counts = ds
        .gt_counts()
        .ok_or_else(|| CmdError::compute("descriptor file has no ground-truth counts"))?;
    let truth: Option<Vec<usize>> = ds.true_domains().and_then(|doms| {
        doms.iter()
            .map(|&d| usize::try_from(d).ok())
            .collect::<Option<Vec<usize>>>()
    });
    let mut run_rows = Vec::new();
    let mut assignments: Vec<PseudoDomainAssignment> = Vec::new();
    for path in &args.runs {
        let (_, a) = load_assignment(path)?;
        if a.labels.len() != ds.len() {
            return Err(CmdError::compute(format!(
                "{}: run labels {} samples, descriptors {}",
                path.display(),
                a.labels.len(),
                ds.len()
            )));
        }
        let strat = count_stratification(&a.labels, &counts, a.k).compute_phase()?;
        let ari = match &truth {
            Some(t) => Some(adjusted_rand_index(&a.labels, t).compute_phase()?),
            None => None,
        };
        run_rows.push(json!({
            "path": path.display().to_string(),
            "epoch": a.epoch,
            "k": a.k,
            "delta_med": strat.delta_med,
            "sigma_med": strat.sigma_med,
            "medians": strat.medians,
            "ari": ari,
        }));
        assignments.push(a);
    }
    let churn = if assignments.len() >= 2 {
        Some(label_churn(&assignments).compute_phase()?)
    } else {
        None
    };
    let config = json!({
        "command": "eval",
        "input": args.input.display().to_string(),
        "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let mut report = json!({
        "config": config,
        "runs": run_rows,
        "churn": churn,
    });
    if !args.no_timestamp {
        report
            .as_object_mut()
            .unwrap()
            .insert("timestamp".into(), json!(now_unix()));
    }
    ensure_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let mut csv = String::from("path,epoch,k,delta_med,sigma_med,ari\n");
    for row in report["runs"].as_array().unwrap() {
        let ari = match &row["ari"] {
            Value::Null => String::new(),
            v => format!("{}", v.as_f64().unwrap()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row["path"].as_str().unwrap(),
            row["epoch"],
            row["k"],
            row["delta_med"].as_f64().unwrap(),
            row["sigma_med"].as_f64().unwrap(),
            ari,
        ));
    }
    write_bytes(&args.out.join("report.csv"), csv.as_bytes())?;
    match churn {
        Some(c) => println!("{} runs, churn {:.6}", assignments.len(), c),
        None => println!("1 run evaluated"),
    }
    Ok(())
}

/// Four well separated Gaussian domains; sign patterns on the first two
/// coordinates keep every pair at least 20 apart in any dimensionality >= 2.
fn bench_spec(n: usize, d: usize, seed: u64) -> SynthSpec {
    let mut domains = Vec::with_capacity(4);
    let base = n / 4;
    for i in 0..4 {
        let mut center = vec![0.0; d];
        center[0] = if i & 1 == 0 { -10.0 } else { 10.0 };
        center[1] = if i & 2 == 0 { -10.0 } else { 10.0 };
        let extra = if i < n % 4 { 1 } else { 0 };
        domains.push(DomainSpec {
            center,
            scale: 1.0,
            n: base + extra,
            count_mean: 50.0,
        });
    }
    SynthSpec {
        domains,
        outlier_fraction: 0.0,
        drift_sigma: 0.0,
        rng_seed: seed,
    }
}

fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(s, _)| (s as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.max(1e-9).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

pub fn bench(args: BenchArgs) -> CmdResult<()> {
    let div = division_params(&args.division, args.seed)?;
    if args.sizes.len() < 2 {
        return Err(CmdError::args("need at least two sizes"));
    }
    if args.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CmdError::args("sizes must be strictly increasing"));
    }
    if args.sizes[0] < 8 {
        return Err(CmdError::args("sizes must be >= 8"));
    }
    if args.d < 2 {
        return Err(CmdError::args("--d must be >= 2"));
    }
    if args.reps == 0 {
        return Err(CmdError::args("--reps must be >= 1"));
    }
    let warm = generate_mixture(&bench_spec(args.sizes[0], args.d, args.seed))
        .compute_phase()?
        .0;
    divide(warm.matrix().view(), &div).compute_phase()?;
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let ds = generate_mixture(&bench_spec(n, args.d, args.seed))
            .compute_phase()?
            .0;
        let z = ds.matrix();
        let mut best = f64::INFINITY;
        let mut leaves = 0;
        for _ in 0..args.reps {
            let start = Instant::now();
            let set = divide(z.view(), &div).compute_phase()?;
            best = best.min(start.elapsed().as_secs_f64());
            leaves = set.balls.len();
        }
        points.push((n, best));
        rows.push(json!({ "n": n, "seconds": best, "leaves": leaves }));
    }
    let slope = log_log_slope(&points);
    let mut config = division_config(&div);
    let obj = config.as_object_mut().unwrap();
    obj.insert("command".into(), json!("bench"));
    obj.insert("sizes".into(), json!(args.sizes));
    obj.insert("d".into(), json!(args.d));
    obj.insert("reps".into(), json!(args.reps));
    obj.insert("seed".into(), json!(args.seed));
    let mut doc = json!({ "config": config, "points": rows, "slope": slope });
    if !args.no_timestamp {
        doc.as_object_mut()
            .unwrap()
            .insert("timestamp".into(), json!(now_unix()));
    }
    ensure_dir(&args.out)?;
    write_json(&args.out.join("bench.json"), &doc)?;
    let mut csv = String::from("n,seconds,leaves\n");
    for row in &points {
        let leaves = rows
            .iter()
            .find(|r| r["n"] == json!(row.0))
            .map(|r| r["leaves"].clone())
            .unwrap_or(Value::Null);
        csv.push_str(&format!("{},{},{}\n", row.0, row.1, leaves));
    }
    write_bytes(&args.out.join("bench.csv"), csv.as_bytes())?;
    println!("log-log slope {slope:.3} over {:?}", args.sizes);
    Ok(())
}

pub fn synth(args: SynthArgs) -> CmdResult<()> {
    let text = read_text(&args.spec)?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CmdError::file(format!("{}: {}", args.spec.display(), e)))?;
    spec.validate().compute_phase()?;
    let (mut ds, _) = generate_mixture(&spec).compute_phase()?;
    if let Some(epoch) = args.epoch {
        let drifted = apply_drift(ds.matrix().view(), epoch, spec.drift_sigma, spec.rng_seed)
            .compute_phase()?;
        let counts = ds.gt_counts();
        let domains = ds.true_domains();
        ds = DescriptorSet::from_matrix(&drifted, counts.as_deref(), domains.as_deref())
            .compute_phase()?;
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    match args.format {
        DescFormat::Bin => save_descriptors_binary(&ds, &args.out).file_phase()?,
        DescFormat::Csv => save_descriptors_csv(&ds, &args.out).file_phase()?,
    }
    println!(
        "wrote {} ({} samples, {} dims)",
        args.out.display(),
        ds.len(),
        ds.dim()
    );
    Ok(())
}

#[derive(Deserialize)]
struct LossesInput {
    batch: BranchBatch,
    pred: Array3<f64>,
    gt: Array3<f64>,
    weights: Option<LossWeights>,
    eps: Option<f64>,
}

fn reshape2(flat: &[f64], shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, flat.to_vec()).expect("probe keeps the shape")
}

fn grad_checks(input: &LossesInput, eps: f64) -> CmdResult<Value> {
    let batch = &input.batch;
    let pred_shape = input.pred.dim();
    let (den_val, den_grad) = loss_den(input.pred.view(), input.gt.view()).compute_phase()?;
    let _ = den_val;
    let gt = input.gt.clone();
    let mut f_den = |x: &[f64]| {
        let p = Array3::from_shape_vec(pred_shape, x.to_vec()).unwrap();
        loss_den(p.view(), gt.view()).unwrap().0
    };
    let pred_flat: Vec<f64> = input.pred.iter().copied().collect();
    let den_analytic: Vec<f64> = den_grad.iter().copied().collect();
    let e_den = max_rel_grad_error(&mut f_den, &pred_flat, &den_analytic, GRAD_STEP);

    let labels = batch.labels.clone();
    let (_, sem_grad) = loss_sem(batch.p.view(), &labels).compute_phase()?;
    let p_shape = batch.p.dim();
    let mut f_sem = |x: &[f64]| loss_sem(reshape2(x, p_shape).view(), &labels).unwrap().0;
    let p_flat: Vec<f64> = batch.p.iter().copied().collect();
    let sem_analytic: Vec<f64> = sem_grad.iter().copied().collect();
    let e_sem = max_rel_grad_error(&mut f_sem, &p_flat, &sem_analytic, GRAD_STEP);

    let (_, sty_grad) = loss_sty(batch.t.view(), &labels).compute_phase()?;
    let t_shape = batch.t.dim();
    let mut f_sty = |x: &[f64]| loss_sty(reshape2(x, t_shape).view(), &labels).unwrap().0;
    let t_flat: Vec<f64> = batch.t.iter().copied().collect();
    let sty_analytic: Vec<f64> = sty_grad.iter().copied().collect();
    let e_sty = max_rel_grad_error(&mut f_sty, &t_flat, &sty_analytic, GRAD_STEP);

    let (_, orth_grad_t, _) =
        loss_orth(batch.s_flat.view(), batch.t_flat.view(), eps).compute_phase()?;
    let s_flat = batch.s_flat.clone();
    let tl_shape = batch.t_flat.dim();
    let mut f_orth =
        |x: &[f64]| loss_orth(s_flat.view(), reshape2(x, tl_shape).view(), eps).unwrap().0;
    let tl_flat: Vec<f64> = batch.t_flat.iter().copied().collect();
    let orth_analytic: Vec<f64> = orth_grad_t.iter().copied().collect();
    let e_orth = max_rel_grad_error(&mut f_orth, &tl_flat, &orth_analytic, GRAD_STEP);

    for (name, err) in [("den", e_den), ("sem", e_sem), ("sty", e_sty), ("orth", e_orth)] {
        if !(err <= GRAD_TOL) {
            return Err(CmdError::compute(format!(
                "gradient check failed for {name}: relative error {err:.3e} exceeds {GRAD_TOL:.0e}"
            )));
        }
    }
    Ok(json!({
        "den": e_den,
        "sem": e_sem,
        "sty": e_sty,
        "orth": e_orth,
        "tol": GRAD_TOL,
    }))
}

pub fn losses(args: LossesArgs) -> CmdResult<()> {
    let text = read_text(&args.input)?;
    let input: LossesInput = serde_json::from_str(&text)
        .map_err(|e| CmdError::file(format!("{}: {}", args.input.display(), e)))?;
    let weights = input.weights.unwrap_or_default();
    let eps = input.eps.unwrap_or(ORTH_EPS);
    let report = evaluate_losses(
        &input.batch,
        input.pred.view(),
        input.gt.view(),
        &weights,
        eps,
    )
    .compute_phase()?;
    let grad_check = if args.check_grads {
        Some(grad_checks(&input, eps)?)
    } else {
        None
    };
    let config = json!({
        "command": "losses",
        "input": args.input.display().to_string(),
        "weights": weights,
        "eps": eps,
        "check_grads": args.check_grads,
    });
    let mut doc = json!({
        "config": config,
        "report": serde_json::to_value(&report).compute_phase()?,
        "grad_check": grad_check,
    });
    if !args.no_timestamp {
        doc.as_object_mut()
            .unwrap()
            .insert("timestamp".into(), json!(now_unix()));
    }
    ensure_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &doc)?;
    println!(
        "den {:.6} sem {:.6} sty {:.6} orth {:.6} total {:.6}",
        report.den, report.sem, report.sty, report.orth, report.total
    );
    Ok(())
}
