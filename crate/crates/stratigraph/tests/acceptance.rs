//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line. Run with
//! `cargo test --test acceptance -- --test-threads=1 --nocapture`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stratigraph::annotation::{
    deposit_many, Annotation, DifferentiaStore, DifferentiaWidth, StorageKind,
};
use stratigraph::formats::{
    export_alife_csv, export_newick, import_alife_csv, parse_newick, serialize_annotation,
    AnnotationSetFile,
};
use stratigraph::quality::{evaluate, random_attachment_tree, recent_inner_node_recovery};
use stratigraph::reconstruct::{
    build_tree, collapse_unifurcations, peel_back_conjoined_leaves, Phylogeny,
};
use stratigraph::refmodel::{downsample, run_evolution, AnnotationConfig, Regime, RunOutput};
use stratigraph::retention::{
    enumerate_retained, gap_bound_check, surface_retained, ColumnUpdatePlan, RetentionPolicy,
    ScheduleStream,
    SurfaceSchedule,
};
use stratigraph::stats::{cliffs_delta, mann_whitney_u, Magnitude};

/// Runs a criterion body and prints exactly one PASS/FAIL line for it.
fn criterion(number: u32, name: &str, body: impl FnOnce() -> Result<(), String>) {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    match outcome {
        Ok(Ok(())) => println!("criterion {number:2} ({name}): PASS [{elapsed:.1?}]"),
        Ok(Err(msg)) => {
            println!("criterion {number:2} ({name}): FAIL: {msg}");
            panic!("criterion {number} failed: {msg}");
        }
        Err(cause) => {
            println!("criterion {number:2} ({name}): FAIL: panicked");
            std::panic::resume_unwind(cause);
        }
    }
}

fn check(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const CAPS: [u64; 4] = [8, 16, 32, 64];

fn all_policies() -> Vec<RetentionPolicy> {
    let mut out = vec![RetentionPolicy::KeepAll];
    for n in CAPS {
        out.push(RetentionPolicy::FixedResolution(n));
        out.push(RetentionPolicy::RecencyProportional(n));
        out.push(RetentionPolicy::SteadyCapped(n));
        out.push(RetentionPolicy::TiltedCapped(n));
        out.push(RetentionPolicy::HybridCapped(n));
    }
    out
}

#[test]
fn c01_retention_replay_equivalence() {
    criterion(1, "retention replay equivalence", || {
        let start = Instant::now();
        for policy in all_policies() {
            // Independent replay: apply per-deposit update plans to an
            // explicit rank vector and compare against the closed form at
            // every generation.
            let mut stream = ScheduleStream::new(policy);
            let mut ranks: Vec<u64> = vec![];
            let mut prev = stream.advance();
            ranks.push(0);
            check(prev == ranks, || format!("{policy}: bad initial set"))?;
            for counter in 0..10_000u64 {
                let next = stream.advance();
                let plan = ColumnUpdatePlan::from_transition(&prev, &next);
                for &i in plan.removed_indices.iter().rev() {
                    ranks.remove(i);
                }
                ranks.push(counter + 1);
                let oracle = enumerate_retained(policy, counter + 2);
                check(ranks == oracle, || {
                    format!("{policy}: replay diverged at counter {counter}")
                })?;
                prev = next;
            }
        }
        check(start.elapsed().as_secs() < 120, || {
            format!("took {:?}, budget 2 min", start.elapsed())
        })
    });
}

#[test]
fn c02_gap_bounds() {
    criterion(2, "steady/tilted gap bounds", || {
        let start = Instant::now();
        let grid: [u64; 8] = [
            1_000, 1_234, 10_000, 98_765, 100_000, 555_555, 777_777, 1_000_000,
        ];
        for n in CAPS {
            let steady = RetentionPolicy::SteadyCapped(n);
            for &g_total in &grid {
                let bound = 2 * g_total.div_ceil(n);
                let got = gap_bound_check(steady, g_total).max_absolute_gap;
                check(got <= bound, || {
                    format!("steady:{n} column gap {got} > {bound} at G={g_total}")
                })?;
                // Surface live set: allowed twice the column's slack.
                let live = surface_retained(steady, n, g_total).unwrap();
                let surface_gap = live.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
                check(surface_gap <= 4 * g_total.div_ceil(n), || {
                    format!("steady:{n} surface gap {surface_gap} at G={g_total}")
                })?;
            }
        }
        // Documented worst-case gap/(time-ago+1) ratios for the tilted
        // schedule; small capacities trade sharply looser ratios.
        let tilted_ratio: [(u64, f64); 6] = [
            (8, 3276.0),
            (16, 21.0),
            (32, 5.0),
            (64, 2.0),
            (128, 1.0),
            (256, 0.5),
        ];
        for (n, limit) in tilted_ratio {
            for &g_total in &grid {
                let got = gap_bound_check(RetentionPolicy::TiltedCapped(n), g_total)
                    .max_recency_ratio;
                check(got <= limit, || {
                    format!("tilted:{n} ratio {got} > {limit} at G={g_total}")
                })?;
            }
        }
        check(start.elapsed().as_secs() < 60, || {
            format!("took {:?}, budget 1 min", start.elapsed())
        })
    });
}

#[test]
fn c03_surface_full_utilization() {
    criterion(3, "surface full utilization", || {
        for s in [8u64, 16, 32, 64, 128, 256] {
            for policy in [
                RetentionPolicy::SteadyCapped(s),
                RetentionPolicy::TiltedCapped(s),
                RetentionPolicy::HybridCapped(s),
            ] {
                let schedule = SurfaceSchedule::new(policy, s, 10 * s).unwrap();
                for g in [s, s + 1, 2 * s, 10 * s] {
                    let live = schedule.live_entries(g);
                    check(live.len() as u64 == s, || {
                        format!("{policy} size {s}: {} live of {s} after {g}", live.len())
                    })?;
                    let mut sites: Vec<u64> = live.iter().map(|&(_, site)| site).collect();
                    sites.sort_unstable();
                    check(sites == (0..s).collect::<Vec<u64>>(), || {
                        format!("{policy} size {s}: sites not all distinct after {g}")
                    })?;
                }
            }
        }
        Ok(())
    });
}

fn simulate(
    regime: Regime,
    pop: usize,
    generations: u64,
    annotation: &AnnotationConfig,
    k: usize,
    seed: u64,
) -> RunOutput {
    let config = regime.config(pop, generations, seed);
    let output = run_evolution(&config, annotation).expect("valid config");
    downsample(&output, k, seed ^ 0x5EED).expect("k <= population")
}

fn reconstruct(output: &RunOutput) -> Phylogeny {
    let tree = build_tree(&output.annotations, &output.taxa).expect("consistent annotations");
    let tree = peel_back_conjoined_leaves(tree, &output.annotations, &output.taxa)
        .expect("labels present");
    collapse_unifurcations(&tree)
}

#[test]
fn c04_perfect_retention_fidelity() {
    criterion(4, "perfect-retention fidelity", || {
        let annotation = AnnotationConfig {
            policy: RetentionPolicy::KeepAll,
            width: DifferentiaWidth::new(64).unwrap(),
            storage: StorageKind::Column,
        };
        let mut perfect = 0;
        for rep in 0..20u64 {
            let start = Instant::now();
            let output = simulate(Regime::Plain, 512, 2_000, &annotation, 128, 40_000 + rep);
            let rec = reconstruct(&output);
            let report = evaluate(&output.reference, &rec).map_err(|e| e.to_string())?;
            if report.strict_triplet_distance == 0.0 {
                perfect += 1;
            }
            check(start.elapsed().as_secs() < 60, || {
                format!("replicate {rep} took {:?}, budget 60 s", start.elapsed())
            })?;
        }
        check(perfect >= 19, || {
            format!("only {perfect}/20 replicates reconstructed perfectly")
        })
    });
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[test]
fn c05_steady_vs_tilted_direction() {
    criterion(5, "steady-vs-tilted direction", || {
        let start = Instant::now();
        let treatments = [
            (RetentionPolicy::SteadyCapped(64), StorageKind::Column),
            (RetentionPolicy::TiltedCapped(64), StorageKind::Surface),
        ];
        let mut losses: Vec<Vec<f64>> = vec![vec![], vec![]];
        let mut recoveries: Vec<Vec<f64>> = vec![vec![], vec![]];
        for (t, (policy, storage)) in treatments.into_iter().enumerate() {
            let annotation = AnnotationConfig {
                policy,
                width: DifferentiaWidth::new(1).unwrap(),
                storage,
            };
            for rep in 0..20u64 {
                let output =
                    simulate(Regime::Plain, 1_024, 10_000, &annotation, 128, 50_000 + rep);
                let rec = reconstruct(&output);
                let report = evaluate(&output.reference, &rec).map_err(|e| e.to_string())?;
                losses[t].push(report.inner_node_loss.ok_or("loss undefined")?);
                recoveries[t].push(recent_inner_node_recovery(&output.reference, &rec, 128));
            }
        }
        let steady_loss = median(&mut losses[0].clone());
        let tilted_loss = median(&mut losses[1].clone());
        let (_, p) = mann_whitney_u(&losses[1], &losses[0]).map_err(|e| e.to_string())?;
        check(tilted_loss < steady_loss, || {
            format!("tilted median loss {tilted_loss} !< steady {steady_loss}")
        })?;
        check(p < 0.05, || format!("loss difference not significant, p={p}"))?;
        let steady_rec = median(&mut recoveries[0].clone());
        let tilted_rec = median(&mut recoveries[1].clone());
        check(steady_rec < 0.10, || {
            format!("steady recent recovery {steady_rec} !< 0.10")
        })?;
        check(tilted_rec > 0.50, || {
            format!("tilted recent recovery {tilted_rec} !> 0.50")
        })?;
        check(start.elapsed().as_secs() < 900, || {
            format!("took {:?}, budget 15 min", start.elapsed())
        })
    });
}

#[test]
fn c06_bit_vs_byte_direction() {
    criterion(6, "bit-vs-byte direction", || {
        // 256-bit annotations: 256 one-bit sites versus 32 eight-bit sites.
        // Hybrid retention separates the treatments most cleanly at desk
        // scale: steady halves expose byte's coarse deep resolution while
        // tilted halves keep recent joins comparable.
        let bit = AnnotationConfig {
            policy: RetentionPolicy::HybridCapped(256),
            width: DifferentiaWidth::new(1).unwrap(),
            storage: StorageKind::Surface,
        };
        let byte = AnnotationConfig {
            policy: RetentionPolicy::HybridCapped(32),
            width: DifferentiaWidth::new(8).unwrap(),
            storage: StorageKind::Surface,
        };
        let mut byte_lax_wins = 0;
        let mut bit_strict_wins = 0;
        for rep in 0..20u64 {
            let seed = 60_000 + rep;
            let run = |cfg: &AnnotationConfig| {
                let output = simulate(Regime::Plain, 1_024, 10_000, cfg, 128, seed);
                let rec = reconstruct(&output);
                evaluate(&output.reference, &rec).map_err(|e| e.to_string())
            };
            let bit_report = run(&bit)?;
            let byte_report = run(&byte)?;
            if byte_report.lax_triplet_distance <= bit_report.lax_triplet_distance {
                byte_lax_wins += 1;
            }
            if bit_report.strict_triplet_distance <= byte_report.strict_triplet_distance {
                bit_strict_wins += 1;
            }
        }
        check(byte_lax_wins >= 15, || {
            format!("byte lax <= bit lax in only {byte_lax_wins}/20 replicates")
        })?;
        check(bit_strict_wins >= 15, || {
            format!("bit strict <= byte strict in only {bit_strict_wins}/20 replicates")
        })
    });
}

/// Fully resolved left-deep binary tree over labels `t0..`.
fn caterpillar(n: usize) -> Phylogeny {
    let mut tree = Phylogeny::with_root(0);
    let final_time = n as u64;
    let mut spine = tree.root;
    tree.add_child(spine, final_time, Some("t0".to_string()));
    for i in 1..n {
        if i + 1 < n {
            let next = tree.add_child(spine, i as u64, None);
            tree.add_child(next, final_time, Some(format!("t{i}")));
            spine = next;
        } else {
            tree.add_child(spine, final_time, Some(format!("t{i}")));
        }
    }
    tree
}

#[test]
fn c07_triplet_metric_calibration() {
    criterion(7, "triplet metric calibration", || {
        let tree = random_attachment_tree(50, 7);
        let same = evaluate(&tree, &tree).map_err(|e| e.to_string())?;
        check(
            same.strict_triplet_distance == 0.0 && same.lax_triplet_distance == 0.0,
            || "identical trees scored nonzero".to_string(),
        )?;
        let mut total = 0.0;
        for i in 0..20u64 {
            let a = random_attachment_tree(50, i);
            let b = random_attachment_tree(50, 5_000 + i);
            total += evaluate(&a, &b).map_err(|e| e.to_string())?.strict_triplet_distance;
        }
        let mean = total / 20.0;
        check((0.45..=0.55).contains(&mean), || {
            format!("random-pair mean strict distance {mean} outside 0.45..0.55")
        })?;
        let reference = caterpillar(10);
        let mut star = Phylogeny::with_root(0);
        for i in 0..10 {
            star.add_child(star.root, 10, Some(format!("t{i}")));
        }
        let report = evaluate(&reference, &star).map_err(|e| e.to_string())?;
        check(report.strict_triplet_distance == 1.0, || {
            format!("star strict {}", report.strict_triplet_distance)
        })?;
        check(report.lax_triplet_distance == 0.0, || {
            format!("star lax {}", report.lax_triplet_distance)
        })?;
        check(report.inner_node_loss == Some(1.0), || {
            format!("star loss {:?}", report.inner_node_loss)
        })
    });
}

#[test]
fn c08_statistics_oracles() {
    criterion(8, "statistics oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        for case in 0..500 {
            let na = rng.gen_range(1..=8);
            let nb = rng.gen_range(1..=8);
            // Small integer values force ties through both code paths.
            let a: Vec<f64> = (0..na).map(|_| rng.gen_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..6) as f64).collect();
            let mut more = 0i64;
            let mut less = 0i64;
            for &x in &a {
                for &y in &b {
                    if x > y {
                        more += 1;
                    } else if x < y {
                        less += 1;
                    }
                }
            }
            let brute = (more - less) as f64 / (na * nb) as f64;
            let got = cliffs_delta(&a, &b).map_err(|e| e.to_string())?;
            check((got - brute).abs() < 1e-12, || {
                format!("case {case}: delta {got} vs brute force {brute}")
            })?;
        }
        for _ in 0..100 {
            // Tie-free data: delta must satisfy the U-statistic identity.
            let mut pool: Vec<f64> = (0..20).map(|i| i as f64).collect();
            for i in (1..pool.len()).rev() {
                pool.swap(i, rng.gen_range(0..=i));
            }
            let na = rng.gen_range(2..=10);
            let (a, b) = pool.split_at(na);
            let delta = cliffs_delta(a, b).map_err(|e| e.to_string())?;
            let (u, _) = mann_whitney_u(a, b).map_err(|e| e.to_string())?;
            let identity = 2.0 * u / (a.len() * b.len()) as f64 - 1.0;
            check((delta - identity).abs() < 1e-12, || {
                format!("identity violated: {delta} vs {identity}")
            })?;
        }
        let labels = [
            (0.1469, Magnitude::Negligible),
            (0.147, Magnitude::Small),
            (0.3299, Magnitude::Small),
            (0.33, Magnitude::Medium),
            (0.4739, Magnitude::Medium),
            (0.474, Magnitude::Large),
            (-0.147, Magnitude::Small),
            (-0.474, Magnitude::Large),
        ];
        for (delta, expect) in labels {
            check(Magnitude::from_delta(delta) == expect, || {
                format!("magnitude of {delta} != {expect:?}")
            })?;
        }
        Ok(())
    });
}

#[test]
fn c09_reconstruction_performance() {
    criterion(9, "reconstruction performance", || {
        let annotation = AnnotationConfig {
            policy: RetentionPolicy::TiltedCapped(64),
            width: DifferentiaWidth::new(1).unwrap(),
            storage: StorageKind::Surface,
        };
        let output = simulate(Regime::Plain, 512, 1_000, &annotation, 500, 99);
        let start = Instant::now();
        let rec = reconstruct(&output);
        let elapsed = start.elapsed();
        check(rec.leaves().len() == 500, || {
            format!("expected 500 leaves, got {}", rec.leaves().len())
        })?;
        check(elapsed.as_millis() < 1_000, || {
            format!("500-leaf reconstruction took {elapsed:?}, budget 1 s")
        })
    });
}

#[test]
fn c10_serialization_round_trips() {
    criterion(10, "serialization round trips", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        let mut taxa = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..1_000 {
            let (policy, storage, capacity) = match rng.gen_range(0..6) {
                0 => (RetentionPolicy::KeepAll, StorageKind::Column, 0),
                1 => (
                    RetentionPolicy::FixedResolution(rng.gen_range(1..20)),
                    StorageKind::Column,
                    0,
                ),
                2 => (
                    RetentionPolicy::RecencyProportional(rng.gen_range(1..20)),
                    StorageKind::Column,
                    0,
                ),
                3 => (RetentionPolicy::SteadyCapped(16), StorageKind::Surface, 16),
                4 => (RetentionPolicy::TiltedCapped(32), StorageKind::Surface, 32),
                _ => (RetentionPolicy::HybridCapped(8), StorageKind::Column, 0),
            };
            let width =
                DifferentiaWidth::new([1u8, 8, 32, 64][rng.gen_range(0..4)]).unwrap();
            let mut annotation = Annotation::create(policy, width, storage, capacity, i)
                .map_err(|e| e.to_string())?;
            deposit_many(&mut annotation, rng.gen_range(0..200), i ^ 0xFACE);
            taxa.push(format!("t{i}"));
            annotations.push(annotation);
        }
        let set = AnnotationSetFile::new(taxa, &annotations);
        let from_json = AnnotationSetFile::from_json(&set.to_json())
            .map_err(|e| e.to_string())?
            .annotations()
            .map_err(|e| e.to_string())?;
        check(from_json == annotations, || {
            "JSON round trip altered an annotation".to_string()
        })?;
        let csv = set.to_csv().map_err(|e| e.to_string())?;
        let from_csv = AnnotationSetFile::from_csv(&csv)
            .map_err(|e| e.to_string())?
            .annotations()
            .map_err(|e| e.to_string())?;
        check(from_csv == annotations, || {
            "CSV round trip altered an annotation".to_string()
        })?;

        // Golden bit-packing vector: 1-bit values 1,0,1,1,0,0,1,1 pack
        // big-endian-within-byte to 0xB3.
        let store = DifferentiaStore::from_values(
            DifferentiaWidth::new(1).unwrap(),
            &[1, 0, 1, 1, 0, 0, 1, 1],
        );
        let golden = Annotation::from_parts(RetentionPolicy::KeepAll, StorageKind::Column, 7, store)
            .map_err(|e| e.to_string())?;
        let record = serialize_annotation(&golden);
        check(record.differentia_hex == "B3", || {
            format!("golden hex {} != B3", record.differentia_hex)
        })?;

        let tree = random_attachment_tree(40, 3);
        let csv = export_alife_csv(&tree).map_err(|e| e.to_string())?;
        let back = import_alife_csv(&csv).map_err(|e| e.to_string())?;
        check(
            export_alife_csv(&back).map_err(|e| e.to_string())? == csv,
            || "alife CSV round trip not isomorphic".to_string(),
        )?;
        let newick = export_newick(&tree, false);
        let back = parse_newick(&newick).map_err(|e| e.to_string())?;
        check(export_newick(&back, false) == newick, || {
            "Newick round trip not isomorphic".to_string()
        })
    });
}
