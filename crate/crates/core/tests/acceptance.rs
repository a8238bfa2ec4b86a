//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! training criteria (2 to 5) take several minutes on one CPU core.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use dopplernet::array::DenseArray;
use dopplernet::confidence::{default_grid, mc_dropout_head, Decision};
use dopplernet::engine::{LayerKind, LayerNode, Phase};
use dopplernet::harness::artifact;
use dopplernet::harness::checks::gradcheck_suite;
use dopplernet::harness::config::{Resolved, RunConfig};
use dopplernet::harness::experiment::run_on;
use dopplernet::harness::run;
use dopplernet::heads::{
    bucket_baseline, validate_table, BaselineBucket, HeadsConfig, MappingRow, MappingTable,
    Violation, DEFAULT_HEADS_TOML,
};
use dopplernet::synth::PhantomConfig;
use dopplernet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn config(dir: &Path, toml: &str, seed: u64) -> Result<Resolved> {
    RunConfig::parse(toml)?.resolve(dir.to_path_buf(), Some(seed))
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let cases = gradcheck_suite(2024, 3)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("cases");
    let kinds: BTreeSet<&str> = cases
        .iter()
        .filter_map(|c| c.case.split_once('#').map(|(k, _)| k))
        .collect();
    let random = cases.iter().filter(|c| c.case.contains('#')).count();
    let checked_all = cases.iter().all(|c| c.checked > 0);
    outcome(
        worst.max_rel_err < 1e-4 && random >= 20 && checked_all && secs < 120.0,
        format!(
            "{} cases ({random} random layer configs over {} kinds + desk model), max rel err {:.2e} in {}, {secs:.1}s",
            cases.len(),
            kinds.len(),
            worst.max_rel_err,
            worst.case
        ),
    )
}

fn heatmap_ablation(dir: &Path) -> Result<Outcome> {
    let t = Instant::now();
    let r = config(dir, "", 42)?;
    let phantom = PhantomConfig::desk();
    let res = run_on(&r, "desk", &phantom, &["E1", "E2"], &mut |_, _| {})?;
    let (e1, e2) = (res[0].row.accuracy, res[1].row.accuracy);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        e2 >= 0.90 && e1 <= 0.65 && e2 - e1 >= 0.25 && secs < 1200.0,
        format!(
            "E1 image-only {e1:.4}, E2 image+heatmap {e2:.4}, gap {:.1} points, {secs:.0}s",
            100.0 * (e2 - e1)
        ),
    )
}

fn multihead(dir: &Path) -> Result<Outcome> {
    let r = config(dir, "", 42)?;
    let phantom = PhantomConfig::overlap();
    let res = run_on(&r, "overlap", &phantom, &["E3", "E4", "E5"], &mut |_, _| {})?;
    let acc: Vec<f64> = res.iter().map(|x| x.row.accuracy).collect();
    let e5 = &res[2].report.confusion;
    let structural_cells = e5.structural.iter().flatten().filter(|&&s| s).count();
    let structural_hits = e5.structural_count();
    outcome(
        acc[2] >= acc[0] && acc[1] >= acc[0] && structural_hits == 0 && structural_cells > 0,
        format!(
            "overlap phantom: E3 {:.4}, E4 {:.4}, E5 {:.4}; E5 has {structural_hits} samples in {structural_cells} cross-head cells",
            acc[0], acc[1], acc[2]
        ),
    )
}

/// Trains and calibrates the desk multihead model used by criteria 4, 5 and 8.
fn desk_pipeline(dir: &Path) -> Result<Resolved> {
    let r = config(dir, "", 42)?;
    run::gen(&r)?;
    run::train(&r, &mut |_| {})?;
    run::calibrate(&r)?;
    Ok(r)
}

fn calibration(r: &Resolved) -> Result<Outcome> {
    let clf = run::load_model(r)?;
    let recs = run::training_set(r)?;
    let grid = default_grid();
    let mut worst_dev: f64 = 0.0;
    let mut nested = true;
    let mut errors_ok = true;
    let mut prev: Option<(BTreeSet<usize>, usize)> = None;
    for &q in &grid {
        let preds = clf.classify(&recs, Some(q))?;
        let ignored: BTreeSet<usize> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.decision == Decision::Ignored)
            .map(|(i, _)| i)
            .collect();
        let accepted_errors = preds
            .iter()
            .zip(&recs)
            .filter(|(p, r)| {
                p.decision == Decision::Accepted && r.label.as_deref() != Some(&p.output_class)
            })
            .count();
        if q > 0.0 {
            let rate = ignored.len() as f64 / recs.len() as f64;
            worst_dev = worst_dev.max((rate - q).abs());
        }
        if let Some((pi, pe)) = &prev {
            nested &= pi.is_subset(&ignored);
            errors_ok &= accepted_errors <= *pe;
        }
        prev = Some((ignored, accepted_errors));
    }
    let monotone = clf.nets.iter().all(|n| {
        let t = n.quantiles.as_ref().expect("calibrated");
        t.classes
            .iter()
            .all(|c| c.cutoffs.windows(2).all(|w| w[0] <= w[1]))
    });
    outcome(
        worst_dev <= 0.01 && monotone && nested && errors_ok,
        format!(
            "{} calibration records, max |ignored - q| {:.2} points; cutoffs monotone {monotone}, nested {nested}, accepted errors nonincreasing {errors_ok}",
            recs.len(),
            100.0 * worst_dev
        ),
    )
}

fn rejection(r: &Resolved) -> Result<Outcome> {
    let rows = run::sweep(r)?;
    let rate = |set: &str, q: f64| {
        rows.iter()
            .find(|s| s.dataset == set && (s.q - q).abs() < 1e-12)
            .map(|s| s.ignored_rate)
            .expect("grid point present")
    };
    let mut strict = true;
    for q in default_grid().into_iter().filter(|&q| q >= 0.005 - 1e-12) {
        let t = rate("test", q);
        strict &= rate("unknown", q) > t && rate("extra", q) > t;
    }
    let (t5, u5, x5) = (rate("test", 0.05), rate("unknown", 0.05), rate("extra", 0.05));
    let double = u5 >= 2.0 * t5 && x5 >= 2.0 * t5;
    outcome(
        strict && double,
        format!(
            "ignored at q=0.5%: test {:.3} unknown {:.3} extra {:.3}; at q=5%: test {t5:.3} unknown {u5:.3} extra {x5:.3}; strictly above test at every q {strict}",
            rate("test", 0.005),
            rate("unknown", 0.005),
            rate("extra", 0.005)
        ),
    )
}

fn corrupted_tables(table: &MappingTable) -> Vec<(&'static str, MappingTable, fn(&Violation) -> bool)> {
    let mut out: Vec<(&'static str, MappingTable, fn(&Violation) -> bool)> = Vec::new();

    let mut t = table.clone();
    let i = t.rows.iter().position(|r| r.class == "TR").expect("TR row");
    t.rows.remove(i);
    out.push(("missing row", t, |v| matches!(v, Violation::Uncovered { .. })));

    let mut t = table.clone();
    let dup = t.rows.iter().find(|r| r.class == "TR").expect("TR row").clone();
    t.rows.push(MappingRow {
        output: "TVI".into(),
        ..dup
    });
    out.push(("colliding rows", t, |v| matches!(v, Violation::Ambiguous { .. })));

    let mut t = table.clone();
    for r in t.rows.iter_mut().filter(|r| r.class == "NO_B") {
        r.output = "SEPT_E".into();
    }
    out.push(("broken NO merge", t, |v| matches!(v, Violation::NoMergeBroken { .. })));

    let mut t = table.clone();
    t.rows[0].output = "XYZ".into();
    out.push(("output outside universe", t, |v| matches!(v, Violation::UnknownOutput { .. })));

    let mut t = table.clone();
    t.universe.push("GHOST".into());
    out.push(("unreachable output", t, |v| matches!(v, Violation::Unreachable { .. })));
    out
}

fn mapping() -> Result<Outcome> {
    let cfg = HeadsConfig::parse(DEFAULT_HEADS_TOML)?;
    let layout = cfg.layout();
    let shipped = validate_table(&cfg.mapping, &layout);
    let universe = cfg.mapping.universe.len();
    let mut rejected = Vec::new();
    for (name, t, expect) in corrupted_tables(&cfg.mapping) {
        let v = validate_table(&t, &layout);
        if v.iter().any(expect) {
            rejected.push(name);
        }
    }
    let eps = 1e-9;
    let boundary = [
        (0.0, BaselineBucket::Negative),
        (0.5 - eps, BaselineBucket::Negative),
        (0.5, BaselineBucket::Zero),
        (0.5 + eps, BaselineBucket::Positive),
        (1.0, BaselineBucket::Positive),
    ];
    let buckets_ok = boundary
        .iter()
        .all(|&(b, want)| bucket_baseline(b).ok() == Some(want));
    outcome(
        shipped.is_empty() && universe == 19 && rejected.len() == 5 && buckets_ok,
        format!(
            "shipped table: {} violations, {universe} output classes; corrupted tables rejected {}/5; baseline boundaries ok {buckets_ok}",
            shipped.len(),
            rejected.len()
        ),
    )
}

fn mc_dropout() -> Result<Outcome> {
    let mut dense = LayerNode::<f32>::new(
        "fc",
        LayerKind::Dense {
            in_features: 4,
            out_features: 3,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in &mut dense.params {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let feats = DenseArray::from_vec(&[2, 4], (0..8).map(|i| 0.3 * i as f32 - 1.0).collect())?;
    let subsets: Vec<&[usize]> = vec![&[0, 1, 2], &[0, 1]];
    let zero = mc_dropout_head(&dense, &feats, &subsets, 0.0, 20, 5)?;
    let det = dopplernet::engine::layer_forward(
        &dense,
        &[&feats],
        &mut dopplernet::engine::ForwardCtx::eval(),
    )?
    .value;
    let degenerate = zero.var_presoftmax.iter().all(|&v| v == 0.0)
        && zero
            .mean_presoftmax
            .iter()
            .zip(det.data())
            .all(|(&m, &d)| m == d as f64);

    let a = mc_dropout_head(&dense, &feats, &subsets, 0.5, 100, 77)?;
    let b = mc_dropout_head(&dense, &feats, &subsets, 0.5, 100, 77)?;
    let deterministic = a == b;

    // one unit: y = w x m / (1 - p) with m ~ Bernoulli(1 - p); p = 0.5 would make
    // (y - mean)^2 constant and the variance estimator's standard error zero
    let (p, w, x, runs) = (0.3f64, 1.5f32, 0.8f32, 20_000usize);
    let mut unit = LayerNode::<f32>::new(
        "unit",
        LayerKind::Dense {
            in_features: 1,
            out_features: 1,
        },
    );
    unit.params[0].data_mut()[0] = w;
    let one = DenseArray::from_vec(&[1, 1], vec![x])?;
    let s = mc_dropout_head(&unit, &one, &[&[0]], p, runs, 3)?;
    let c = (w * x) as f64;
    let hi = c / (1.0 - p);
    let mean = c;
    let var = hi * hi * (1.0 - p) - mean * mean;
    let m4 = (1.0 - p) * (hi - mean).powi(4) + p * mean.powi(4);
    let se_mean = (var / runs as f64).sqrt();
    let se_var = ((m4 - var * var) / runs as f64).sqrt();
    let z_mean = (s.mean_presoftmax[0] - mean).abs() / se_mean;
    let z_var = (s.var_presoftmax[0] - var).abs() / se_var;
    outcome(
        degenerate && deterministic && z_mean < 3.0 && z_var < 3.0,
        format!(
            "rate 0 degenerate {degenerate}; fixed-seed repeat identical {deterministic}; unit moments within {z_mean:.2} and {z_var:.2} standard errors"
        ),
    )
}

fn persistence(r: &Resolved) -> Result<Outcome> {
    let path = r.artifact_path();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let loaded = artifact::from_bytes(&bytes)?;
    let identical_bytes = artifact::to_bytes(&loaded) == bytes;
    let original = run::load_model(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut same = 0;
    for i in 0..100 {
        let ni = i % original.nets.len();
        let spec = &original.nets[ni].model.spec;
        let n = spec.input_channels * spec.input_size * spec.input_size;
        let x = DenseArray::from_vec(
            &[1, spec.input_channels, spec.input_size, spec.input_size],
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )?;
        let a = original.nets[ni].model.forward(&x, Phase::Eval)?;
        let b = loaded.nets[ni].model.forward(&x, Phase::Eval)?;
        let bits = |d: &DenseArray<f32>| d.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a) == bits(&b) {
            same += 1;
        }
    }
    let mut named = Vec::new();
    for name in artifact::SECTIONS {
        let Some(range) = artifact::section_range(&bytes, name) else {
            continue;
        };
        let mut bad = bytes.clone();
        bad[range.start + range.len() / 2] ^= 0x10;
        if let Err(Error::Checksum { section }) = artifact::from_bytes(&bad) {
            if section == name {
                named.push(name);
            }
        }
    }
    let present = artifact::SECTIONS
        .iter()
        .filter(|s| artifact::section_range(&bytes, s).is_some())
        .count();
    outcome(
        identical_bytes && same == 100 && named.len() == present,
        format!(
            "save/load/save identical {identical_bytes}; {same}/100 random inputs bit-identical; {}/{present} corrupted sections named ({})",
            named.len(),
            named.join(", ")
        ),
    )
}

const TINY: &str = r#"
variant = "multihead"
[data.counts]
train = 96
val = 16
test = 48
unknown = 12
extra = 6
[train]
epochs = 2
batch_size = 16
"#;

fn determinism(root: &Path) -> Result<Outcome> {
    let files = ["train_log.csv", "confusion.csv", "metrics.csv", "sweep.csv", "confusion.svg", "sweep.svg"];
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = root.join(format!("run{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let r = config(&dir, TINY, 5)?;
        run::gen(&r)?;
        run::train(&r, &mut |_| {})?;
        run::calibrate(&r)?;
        run::eval(&r)?;
        run::sweep(&r)?;
        let out = r.out_dir();
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(out.join(f)).map_err(|e| Error::io(out.join(f), e)))
            .collect::<Result<_>>()?;
        runs.push(bytes);
    }
    let same: Vec<&str> = files
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a == b)
        .map(|(f, _)| *f)
        .collect();
    outcome(
        same.len() == files.len(),
        format!("{}/{} report files byte-identical across two runs", same.len(), files.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(u32, &str, Result<Outcome>)> = Vec::new();
    let mut report = |n: u32, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!(
                "criterion {n} {name}: {} ({})",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            ),
            Err(e) => println!("criterion {n} {name}: FAIL (error: {e})"),
        }
        results.push((n, name, r));
    };

    report(1, "gradient oracle", gradients());
    report(2, "heatmap ablation", heatmap_ablation(root));
    report(3, "multihead structure", multihead(root));
    let desk_dir = root.join("desk");
    let desk = std::fs::create_dir_all(&desk_dir)
        .map_err(|e| Error::io(&desk_dir, e))
        .and_then(|_| desk_pipeline(&desk_dir));
    match &desk {
        Ok(r) => {
            report(4, "confidence calibration", calibration(r));
            report(5, "out-of-distribution rejection", rejection(r));
        }
        Err(e) => {
            report(4, "confidence calibration", Err(Error::Internal(format!("pipeline: {e}"))));
            report(5, "out-of-distribution rejection", Err(Error::Internal(format!("pipeline: {e}"))));
        }
    }
    report(6, "mapping engine", mapping());
    report(7, "MC-dropout comparator", mc_dropout());
    match &desk {
        Ok(r) => report(8, "persistence", persistence(r)),
        Err(e) => report(8, "persistence", Err(Error::Internal(format!("pipeline: {e}")))),
    }
    let det_dir = root.join("determinism");
    report(9, "determinism", determinism(&det_dir));

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .map(|(n, _, _)| *n)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
