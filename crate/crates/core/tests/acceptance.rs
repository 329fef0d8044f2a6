//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Matrix3;
use needleguide::blobdetect::{circularity, detect_blobs, BlobFilterParams, GrayImage};
use needleguide::correspond::{
    build_edm, match_permutation, match_permutation_bnb, mean_squared_discrepancy, Edm, Labeling,
};
use needleguide::geom::{direction, Pixel, Point3, RigidTransform};
use needleguide::guidance::{
    compute_command, gear_forward, gear_inverse, AngleLimits, DeviceState, GearRatios, Phase,
};
use needleguide::harness::{run_experiment, trials_csv, ExperimentConfig, ExperimentReport, TrialRecord};
use needleguide::phantomsim::render_disc;
use needleguide::pipeline::SimConfig;
use needleguide::register::{fit_tps, procrustes, rigid_sse, LesionEstimate, TransformKind};
use needleguide::stats::{spearman, wilcoxon_signed_rank};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_point<R: Rng>(rng: &mut R, half: f64) -> Point3 {
    Point3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = random_point(rng, 1.0).coords;
        if v.norm() > 0.1 {
            break v.normalize();
        }
    };
    RigidTransform::from_axis_angle(&axis, rng.random_range(-max_angle..max_angle)).rotation
}

fn tps_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(4..=12);
        let src: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 60.0)).collect();
        let dst: Vec<Point3> = src.iter().map(|p| p + random_point(&mut rng, 5.0).coords).collect();
        let model = fit_tps(&src, &dst, 0.0).expect("random points are in general position");
        for (s, d) in src.iter().zip(&dst) {
            worst = worst.max((model.apply(s) - d).norm());
        }
    }
    outcome(worst < 1e-8, format!("50 datasets, worst control-point error {worst:.3e} mm (limit 1e-8)"))
}

fn procrustes_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut rot_err, mut trans_err): (f64, f64) = (0.0, 0.0);
    let mut beaten = 0;
    for _ in 0..100 {
        let src: Vec<Point3> = (0..6).map(|_| random_point(&mut rng, 50.0)).collect();
        let truth = RigidTransform::new(random_rotation(&mut rng, PI), random_point(&mut rng, 200.0).coords);
        let dst: Vec<Point3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = procrustes(&src, &dst).unwrap();
        rot_err = rot_err.max((est.rotation - truth.rotation).norm());
        trans_err = trans_err.max((est.translation - truth.translation).norm());

        let noisy: Vec<Point3> = dst.iter().map(|p| p + random_point(&mut rng, 1.0).coords).collect();
        let best = procrustes(&src, &noisy).unwrap();
        let best_sse = rigid_sse(&best, &src, &noisy);
        for k in 0..1000 {
            let alt = if k % 2 == 0 {
                RigidTransform::new(random_rotation(&mut rng, 0.05), random_point(&mut rng, 1.0).coords).compose(&best)
            } else {
                RigidTransform::new(random_rotation(&mut rng, PI), random_point(&mut rng, 300.0).coords)
            };
            if rigid_sse(&alt, &src, &noisy) < best_sse - 1e-9 {
                beaten += 1;
            }
        }
    }
    outcome(
        rot_err < 1e-9 && trans_err < 1e-9 && beaten == 0,
        format!(
            "100 motions, rotation error {rot_err:.2e}, translation error {trans_err:.2e}, \
             {beaten} of 100000 alternatives beat the fitted residual"
        ),
    )
}

/// Minimum-cost injection by plain enumeration, ties to the lexicographically smallest.
fn brute_force(rm: &Edm, mm: &Edm) -> (Vec<usize>, f64) {
    fn go(k: usize, cur: &mut Vec<usize>, used: &mut [bool], rm: &Edm, mm: &Edm, best: &mut Option<(Vec<usize>, f64)>) {
        if k == mm.n() {
            let a: Vec<Option<usize>> = cur.iter().copied().map(Some).collect();
            let c = mean_squared_discrepancy(&a, rm, mm);
            if best.as_ref().is_none_or(|(_, b)| c < *b) {
                *best = Some((cur.clone(), c));
            }
            return;
        }
        for q in 0..rm.n() {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                go(k + 1, cur, used, rm, mm, best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut best = None;
    go(0, &mut Vec::new(), &mut vec![false; rm.n()], rm, mm, &mut best);
    best.unwrap()
}

fn assignment(l: &Labeling) -> Vec<usize> {
    l.assignment.iter().map(|a| a.expect("complete injection")).collect()
}

fn correspondence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(4..=7);
        let extra = rng.random_range(0..=8 - n);
        let model: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 60.0)).collect();
        let pose = RigidTransform::new(random_rotation(&mut rng, PI), random_point(&mut rng, 100.0).coords);
        let mut seen: Vec<Point3> = model
            .iter()
            .map(|p| pose.apply(p) + random_point(&mut rng, 1.5).coords)
            .collect();
        seen.extend((0..extra).map(|_| random_point(&mut rng, 80.0)));
        seen.shuffle(&mut rng);
        let (rm, mm) = (build_edm(&seen).unwrap(), build_edm(&model).unwrap());
        let (oracle, cost) = brute_force(&rm, &mm);
        for l in [match_permutation(&rm, &mm).unwrap(), match_permutation_bnb(&rm, &mm, None).unwrap()] {
            if assignment(&l) != oracle || (l.residual - cost).abs() > 1e-12 * cost.max(1.0) {
                mismatches += 1;
            }
        }
    }
    let mut recovered = 0;
    let trials = 200;
    for _ in 0..trials {
        let n = rng.random_range(4..=10);
        let model: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 60.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let seen: Vec<Point3> = perm.iter().map(|&i| model[i]).collect();
        let l = match_permutation(&build_edm(&seen).unwrap(), &build_edm(&model).unwrap()).unwrap();
        if (0..n).all(|m| l.assignment[m].map(|q| perm[q]) == Some(m)) {
            recovered += 1;
        }
    }
    outcome(
        mismatches == 0 && recovered == trials,
        format!(
            "{mismatches} mismatches against enumeration over 50 instances, \
             zero-noise recovery {recovered}/{trials}"
        ),
    )
}

fn circularity_identities() -> Outcome {
    let circle = circularity(PI, 2.0 * PI).unwrap();
    let square = circularity(1.0, 4.0).unwrap();
    let mut worst = (0.0, 1.0);
    let mut ok = circle == 1.0 && square == PI / 4.0;
    for r in 10..=50 {
        let side = 2 * r + 20;
        let mut img = GrayImage::new(side, side);
        let c = side as f64 / 2.0 + 0.3;
        render_disc(&mut img, &Pixel::new(c, c - 0.2), r as f64, 255, 8);
        let blobs = detect_blobs(
            &img,
            &BlobFilterParams {
                circularity: [0.0, 10.0],
                ..BlobFilterParams::default()
            },
        );
        let Some(b) = blobs.first().filter(|_| blobs.len() == 1) else {
            ok = false;
            continue;
        };
        if (b.circularity - 1.0).abs() > (worst.1 - 1.0f64).abs() {
            worst = (r as f64, b.circularity);
        }
        ok &= (0.9..=1.1).contains(&b.circularity);
    }
    outcome(
        ok,
        format!(
            "circle {circle}, square {square} (pi/4 = {}), rasterized radius 10..50 worst {:.4} at r = {}",
            PI / 4.0,
            worst.1,
            worst.0
        ),
    )
}

fn gear_kinematics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ratios = GearRatios::default();
    let limits = AngleLimits::default();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(-40.0..45.0);
        ok &= gear_forward(t, t, &ratios).0 == 0.0;
        let s = rng.random_range(-90.0..90.0);
        ok &= gear_forward(s, -s, &ratios).1 == 0.0;
        let az = rng.random_range(limits.azimuth_deg[0]..limits.azimuth_deg[1]);
        let el = rng.random_range(limits.elevation_deg[0]..limits.elevation_deg[1]);
        let (t1, t2) = gear_inverse(az, el, &ratios, &limits).unwrap();
        let (a, e) = gear_forward(t1, t2, &ratios);
        worst = worst.max((a - az).abs()).max((e - el).abs());
    }
    outcome(
        ok && worst < 1e-12,
        format!("equal/opposite gear identities hold: {ok}, forward after inverse worst {worst:.2e} deg"),
    )
}

fn clamping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let limits = AngleLimits::default();
    let (mut outside, mut wrong_flag) = (0, 0);
    let mut flagged = 0;
    for i in 0..10_000 {
        let az = rng.random_range(-180.0..180.0);
        let el = rng.random_range(-89.0..89.0);
        let pose = RigidTransform::new(random_rotation(&mut rng, PI), random_point(&mut rng, 500.0).coords);
        let target = pose.apply(&Point3::from(direction(az, el) * rng.random_range(10.0..200.0)));
        let state = DeviceState {
            pose,
            theta1_deg: 0.0,
            theta2_deg: 0.0,
            tip: pose.apply(&Point3::new(0.0, 0.0, 100.0)),
            phase: Phase::Positioning,
        };
        let lesion = LesionEstimate {
            position: target,
            kind: TransformKind::Tps,
            residual_mm: 0.0,
        };
        let cmd = compute_command(&state, &lesion, &limits, None, 0.3, i as f64).unwrap();
        if !limits.contains(cmd.azimuth_deg, cmd.elevation_deg) {
            outside += 1;
        }
        let expect = !limits.contains(az, el);
        if cmd.clamped != expect {
            wrong_flag += 1;
        }
        flagged += usize::from(cmd.clamped);
    }
    outcome(
        outside == 0 && wrong_flag == 0,
        format!("10000 commands: {outside} outside limits, {wrong_flag} wrong clamped flags ({flagged} clamped)"),
    )
}

fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut wilcoxon_bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(5..=10);
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let m = rng.random_range(1..=6) as f64 / 2.0;
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        let zeros = vec![0.0; n];
        let r = wilcoxon_signed_rank(&d, &zeros).unwrap();
        let ranks = naive_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let total: f64 = ranks.iter().sum();
        let w = w_plus.min(total - w_plus);
        let extreme = (0u32..1 << n)
            .filter(|mask| {
                let p: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
                p.min(total - p) <= w + 1e-9
            })
            .count();
        let p = extreme as f64 / (1u64 << n) as f64;
        if r.w != w || r.p_two_sided != p || !r.exact {
            wilcoxon_bad += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(5..=30);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let Ok(rs) = spearman(&x, &y) else { continue };
        let (rx, ry) = (naive_ranks(&x), naive_ranks(&y));
        let nf = n as f64;
        let ties = |v: &[f64]| -> f64 {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s.chunk_by(|a, b| a == b).map(|c| (c.len().pow(3) - c.len()) as f64).sum::<f64>() / 12.0
        };
        let sx = (nf.powi(3) - nf) / 12.0 - ties(&x);
        let sy = (nf.powi(3) - nf) / 12.0 - ties(&y);
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let oracle = (sx + sy - d2) / (2.0 * (sx * sy).sqrt());
        worst = worst.max((rs - oracle).abs());
    }
    outcome(
        wilcoxon_bad == 0 && worst < 1e-12,
        format!(
            "Wilcoxon exact mismatches {wilcoxon_bad}/200, Spearman worst deviation {worst:.2e} over 100 datasets"
        ),
    )
}

struct MetaRun {
    reports: Vec<ExperimentReport>,
    trials: Vec<TrialRecord>,
    seconds: f64,
}

fn meta_runs(cfg: &ExperimentConfig) -> MetaRun {
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut trials = Vec::new();
    for rep in 0..10 {
        let (report, records) = run_experiment(cfg, 15, rep).expect("experiment runs");
        reports.push(report);
        trials.extend(records);
    }
    MetaRun {
        reports,
        trials,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn table_one(run: &MetaRun) -> Outcome {
    let wins = run
        .reports
        .iter()
        .filter(|r| {
            r.table1.tps.mean[3] < r.table1.rigid.mean[3] && r.wilcoxon.is_some_and(|w| w.p_two_sided < 0.05)
        })
        .count();
    let lower_mean = run.reports.iter().filter(|r| r.table1.tps.mean[3] < r.table1.rigid.mean[3]).count();
    let ps: Vec<String> = run
        .reports
        .iter()
        .map(|r| r.wilcoxon.map_or("-".into(), |w| format!("{:.3}", w.p_two_sided)))
        .collect();
    let disp: f64 = run.reports.iter().map(|r| r.table1.target_displacement.mean[3]).sum::<f64>() / 10.0;
    let tps: f64 = run.reports.iter().map(|r| r.table1.tps.mean[3]).sum::<f64>() / 10.0;
    let rigid: f64 = run.reports.iter().map(|r| r.table1.rigid.mean[3]).sum::<f64>() / 10.0;
    let disp_ok = (disp - 4.3).abs() <= 0.3 * 4.3;
    outcome(
        wins >= 8 && disp_ok && run.seconds < 120.0,
        format!(
            "{wins}/10 meta-repetitions with TPS < rigid and p < 0.05 (need 8; TPS mean lower in {lower_mean}/10; \
             p = [{}]); mean norm TPS {tps:.3} mm, rigid {rigid:.3} mm; displacement {disp:.3} mm \
             (4.3 +/- 30%); {:.1} s",
            ps.join(", "),
            run.seconds
        ),
    )
}

fn table_two(run: &MetaRun) -> Outcome {
    let mut quiet = ExperimentConfig {
        sim: SimConfig::noiseless(),
        checks: Vec::new(),
        ..ExperimentConfig::default()
    };
    quiet.operator.max_frames = 1800;
    let (_, clean) = run_experiment(&quiet, 15, 99).expect("noiseless experiment runs");
    let clean_worst = clean.iter().map(|t| t.target_needle.norm).fold(0.0, f64::max);
    let worst_mean = run.reports.iter().map(|r| r.table2.needle_frame.mean[3]).fold(0.0, f64::max);
    let n = run.trials.len() as f64;
    let cam: Vec<f64> = (0..3)
        .map(|k| run.trials.iter().map(|t| t.target_camera.d[k].abs()).sum::<f64>() / n)
        .collect();
    let depth = cam[2] > cam[0] && cam[2] > cam[1];
    outcome(
        clean_worst < 0.1 && worst_mean <= 3.0 && depth,
        format!(
            "noiseless worst targeting {clean_worst:.2e} mm (< 0.1); default-noise mean targeting norm per \
             experiment at most {worst_mean:.3} mm (<= 3); pooled mean |camera d| x {:.3}, y {:.3}, z {:.3}",
            cam[0], cam[1], cam[2]
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::default();
    let a = trials_csv(&run_experiment(&cfg, 4, 42).unwrap().1);
    let b = trials_csv(&run_experiment(&cfg, 4, 42).unwrap().1);
    outcome(a == b, format!("two runs of 4 trials: {} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let mut criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("TPS interpolation exactness", Box::new(tps_exactness)),
        ("Procrustes recovery", Box::new(procrustes_recovery)),
        ("Correspondence oracle equivalence", Box::new(correspondence_oracle)),
        ("Circularity identities", Box::new(circularity_identities)),
        ("Gear kinematics", Box::new(gear_kinematics)),
        ("Clamping", Box::new(clamping)),
    ];
    let run = std::rc::Rc::new(std::cell::OnceCell::new());
    let shared = |f: fn(&MetaRun) -> Outcome| {
        let run = run.clone();
        Box::new(move || f(run.get_or_init(|| meta_runs(&ExperimentConfig::default())))) as Box<dyn Fn() -> Outcome>
    };
    criteria.push(("TPS beats rigid localisation", shared(table_one)));
    criteria.push(("Targeting accuracy", shared(table_two)));
    criteria.push(("Wilcoxon and Spearman correctness", Box::new(statistics_oracles)));
    criteria.push(("Determinism", Box::new(determinism)));

    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        failed += usize::from(!o.passed);
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
