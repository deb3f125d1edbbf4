//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p incunabula-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{gen, oracle};
use incunabula::annotation::{split_dataset, SplitRatios, Subset};
use incunabula::config::{load_config, validate_config};
use incunabula::corpus::{DatasetManifest, PageImage, MANIFEST_FILE};
use incunabula::detection::{
    detect_page, filter_detections, BlobDetector, train_detector, DetectionDataset, Detection, Hyperparams, PageDetections, TrainingStrategy,
};
use incunabula::doclaynet::{
    default_remap, remap_dataset, CocoAnnotation, CocoCategory, CocoDocument, CocoImage, ExternalCategory, RemapTarget,
};
use incunabula::evaluation::{best_operating_point, f1_confidence_curve, match_detections, Aggregation, EvalOptions};
use incunabula::geometry::iou;
use incunabula::ocr::{cer, levenshtein};
use incunabula::picture::{load_labeled_crops, train_subclassifier, CentroidClassifier};
use incunabula::pipeline::{emit_records, read_records_json, run_from_config, PageRecord, RecordFormat};
use incunabula::synthetic::{subclass_texture, write_labeled_dataset};
use incunabula::{LayoutClass, PictureSubclass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const F1_TOL: f64 = 1e-12;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn eval_oracle_equivalence() -> Outcome {
    const CORPORA: u64 = 1000;
    let start = Instant::now();
    let mut max_delta = 0.0f64;
    let mut points = 0usize;
    for seed in 0..CORPORA {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = gen::corpus(&mut rng);
        for aggregation in [Aggregation::Micro, Aggregation::Macro] {
            let opts = EvalOptions { iou_threshold: 0.5, aggregation };
            let expected = oracle::curve(&dets, &gts, 0.5, aggregation == Aggregation::Macro);
            let got = f1_confidence_curve(&dets, &gts, opts, None);
            let (expected, got) = match (expected, got) {
                (None, Err(_)) => continue,
                (Some(e), Ok(g)) => (e, g),
                (e, g) => return Err(format!("seed {seed}: oracle defined={} but implementation ok={}", e.is_some(), g.is_ok())),
            };
            ensure(expected.len() == got.len(), || format!("seed {seed}: {} vs {} thresholds", expected.len(), got.len()))?;
            for (e, g) in expected.iter().zip(&got) {
                points += 1;
                ensure(e.threshold == g.threshold, || format!("seed {seed}: threshold {} vs {}", e.threshold, g.threshold))?;
                for class in LayoutClass::ALL {
                    let mine = g.per_class.get(&class);
                    match (e.per_class[oracle::class_index(class)], mine) {
                        (None, None) => {}
                        (Some((c, f)), Some(p)) => {
                            ensure(
                                (c.tp, c.fp, c.fn_) == (p.counts.tp, p.counts.fp, p.counts.fn_) && p.gt == c.tp + c.fn_,
                                || format!("seed {seed} t={} {class}: oracle {c:?} vs {:?}", e.threshold, p.counts),
                            )?;
                            max_delta = max_delta.max((f - p.f1).abs());
                        }
                        (e, m) => return Err(format!("seed {seed} t={} {class}: presence {} vs {}", g.threshold, e.is_some(), m.is_some())),
                    }
                }
                max_delta = max_delta.max((e.mean_f1 - g.mean_f1).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(max_delta <= F1_TOL, || format!("max |dF1| = {max_delta:e} > {F1_TOL:e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("runtime {elapsed:?} >= 60 s"))?;
    Ok(format!(
        "{CORPORA} corpora x {{micro, macro}}, {points} curve points, counts exact, max |dF1| = {max_delta:e} (tol {F1_TOL:e}), {:.2} s (limit 60 s)",
        elapsed.as_secs_f64()
    ))
}

fn matching_conservation() -> Outcome {
    const CASES: u64 = 1000;
    let mut pages = 0usize;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let (dets, gts) = gen::corpus(&mut rng);
        let threshold: f64 = rng.random_range(0.0..=1.0);
        let iou_thr: f64 = *[0.3, 0.5, 0.75].get(rng.random_range(0..3)).unwrap();
        for (d, g) in dets.iter().zip(&gts) {
            pages += 1;
            let kept = filter_detections(d, threshold);
            let m = match_detections(&kept, g, iou_thr);
            for class in LayoutClass::ALL {
                let c = m.class(class);
                let n_gt = g.count(class);
                let n_kept = kept.iter().filter(|k| k.class == class).count();
                ensure(c.tp + c.fn_ == n_gt && c.tp + c.fp == n_kept, || {
                    format!("seed {seed} {class}: {c:?} with |GT|={n_gt} |kept|={n_kept}")
                })?;
            }
            let mut seen_d = vec![false; kept.len()];
            let mut seen_g = vec![false; g.regions.len()];
            for &(di, gi) in &m.pairs {
                ensure(!seen_d[di] && !seen_g[gi], || format!("seed {seed}: pair ({di},{gi}) reuses a box"))?;
                seen_d[di] = true;
                seen_g[gi] = true;
                ensure(kept[di].class == g.regions[gi].class && iou(&kept[di].bbox, &g.regions[gi].bbox) >= iou_thr, || {
                    format!("seed {seed}: pair ({di},{gi}) is not a valid match")
                })?;
            }
            let (_, oracle_pairs) = oracle::match_page(d, g, threshold, iou_thr);
            ensure(oracle_pairs.len() == m.pairs.len(), || format!("seed {seed}: {} vs {} matches", oracle_pairs.len(), m.pairs.len()))?;
        }
    }
    Ok(format!("{CASES} instances, {pages} pages: tp+fn=|GT|, tp+fp=|kept|, one-to-one pairs, all hold exactly"))
}

fn remap_conservation() -> Outcome {
    use ExternalCategory as E;
    // Expected table, written out category by category.
    let expected: [(E, RemapTarget); 11] = [
        (E::Caption, RemapTarget::Keep(LayoutClass::Text)),
        (E::Footnote, RemapTarget::Keep(LayoutClass::Text)),
        (E::Formula, RemapTarget::Drop),
        (E::ListItem, RemapTarget::Keep(LayoutClass::Text)),
        (E::PageFooter, RemapTarget::Drop),
        (E::PageHeader, RemapTarget::Drop),
        (E::Picture, RemapTarget::Keep(LayoutClass::Picture)),
        (E::SectionHeader, RemapTarget::Keep(LayoutClass::Text)),
        (E::Table, RemapTarget::Keep(LayoutClass::Table)),
        (E::Text, RemapTarget::Keep(LayoutClass::Text)),
        (E::Title, RemapTarget::Keep(LayoutClass::Title)),
    ];
    let rule = default_remap();
    for (cat, target) in expected {
        ensure(rule.target(cat) == Some(target), || format!("{cat}: rule says {:?}, expected {target:?}", rule.target(cat)))?;
    }
    ensure(rule.entries().count() == 11, || format!("rule has {} entries", rule.entries().count()))?;

    // Category k (1-based id) appears k + 2 times across three images.
    let categories: Vec<CocoCategory> =
        E::ALL.iter().enumerate().map(|(i, c)| CocoCategory { id: i as u64 + 1, name: c.name().into() }).collect();
    let images: Vec<CocoImage> =
        (0..3).map(|i| CocoImage { id: i, file_name: format!("img{i}.png"), width: 1000.0, height: 1400.0 }).collect();
    let mut annotations = Vec::new();
    let mut input_by_cat: BTreeMap<E, usize> = BTreeMap::new();
    for (i, cat) in E::ALL.iter().enumerate() {
        for j in 0..(i + 3) {
            annotations.push(CocoAnnotation {
                id: Some(annotations.len() as u64),
                image_id: (j % 3) as u64,
                category_id: i as u64 + 1,
                bbox: [10.0 + 20.0 * j as f64, 15.0 + 30.0 * i as f64, 120.0, 40.0],
            });
            *input_by_cat.entry(*cat).or_default() += 1;
        }
    }
    let input = annotations.len();
    let doc = CocoDocument { images, annotations, categories };
    let out = remap_dataset::<f64>(&doc, &rule).map_err(|e| e.to_string())?;
    let r = &out.report;
    let dropped: usize = expected.iter().filter(|(_, t)| *t == RemapTarget::Drop).map(|(c, _)| input_by_cat[c]).sum();
    ensure(r.input_count == input && r.dropped_total() == dropped && r.degenerate_count == 0, || format!("{r:?}"))?;
    ensure(r.output_count == input - dropped, || format!("output {} != {input} - {dropped}", r.output_count))?;
    for class in LayoutClass::ALL {
        let want: usize =
            expected.iter().filter(|(_, t)| *t == RemapTarget::Keep(class)).map(|(c, _)| input_by_cat[c]).sum();
        let got: usize = out.images.iter().map(|i| i.annotation.count(class)).sum();
        ensure(want == got, || format!("{class}: {got} regions, expected {want}"))?;
    }
    Ok(format!("11/11 rule entries match; {input} in, {dropped} dropped, {} out", r.output_count))
}

fn split_exactness() -> Outcome {
    let pages = (0..500u32)
        .map(|i| PageImage {
            doc_id: format!("doc{}", i / 100),
            page_number: i % 100 + 1,
            width_px: 10,
            height_px: 10,
            path: format!("doc{}_p{:04}.png", i / 100, i % 100 + 1).into(),
        })
        .collect();
    let manifest = DatasetManifest { pages };
    let first = split_dataset(&manifest, SplitRatios::default(), 2024).map_err(|e| e.to_string())?;
    let counts = (first.count(Subset::Train), first.count(Subset::Val), first.count(Subset::Test));
    ensure(counts == (400, 50, 50), || format!("counts {counts:?}"))?;
    for run in 1..5 {
        let again = split_dataset(&manifest, SplitRatios::default(), 2024).map_err(|e| e.to_string())?;
        ensure(again == first, || format!("run {run} differs"))?;
    }
    Ok("500 pages -> 400/50/50, identical assignment over 5 runs".into())
}

fn geometry_bounds() -> Outcome {
    const CASES: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut kept, mut straddling, mut max_err) = (0usize, 0usize, 0.0f64);
    for case in 0..CASES {
        let b = gen::bbox(&mut rng);
        let (w, h) = (rng.random_range(16..3000u32), rng.random_range(16..3000u32));
        let pad = rng.random_range(0..12u32);
        let (x0, y0, x1, y1) = b.corners();
        if x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 {
            straddling += 1;
        }
        let Some(r) = b.to_pixel_rect(w, h, pad) else { continue };
        kept += 1;
        ensure(r.within(w, h), || format!("case {case}: {r:?} outside {w}x{h}"))?;
        let (nx0, ny0, nx1, ny1) = r.normalized::<f64>(w, h);
        let p = pad as f64;
        let clampx = |v: f64| v.clamp(0.0, w as f64);
        let clampy = |v: f64| v.clamp(0.0, h as f64);
        let errs = [
            (nx0 * w as f64 - clampx(x0 * w as f64 - p)).abs(),
            (ny0 * h as f64 - clampy(y0 * h as f64 - p)).abs(),
            (nx1 * w as f64 - clampx(x1 * w as f64 + p)).abs(),
            (ny1 * h as f64 - clampy(y1 * h as f64 + p)).abs(),
        ];
        for e in errs {
            max_err = max_err.max(e);
        }
        ensure(errs.iter().all(|&e| e <= 1.0), || format!("case {case}: edge errors {errs:?} px"))?;
    }
    Ok(format!("{CASES} boxes ({straddling} edge-straddling, {kept} non-empty rects) all in bounds; max round-trip error {max_err:.3} px (tol 1 px)"))
}

fn cer_oracle() -> Outcome {
    const PAIRS: u64 = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..PAIRS {
        let a = gen::text(&mut rng, 30);
        let b = if rng.random_bool(0.5) { gen::text(&mut rng, 30) } else { mutate(&mut rng, &a) };
        let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let want = oracle::edit_distance(&ac, &bc);
        let got = levenshtein(&ac, &bc);
        ensure(want == got, || format!("pair {i} {a:?}/{b:?}: {got} vs {want}"))?;
        let rate = cer(&a, &b);
        let want_rate = want as f64 / ac.len().max(1) as f64;
        ensure(rate == want_rate, || format!("pair {i}: cer {rate} vs {want_rate}"))?;
    }
    Ok(format!("{PAIRS} pairs (length <= 30): distances and CER exactly equal"))
}

fn mutate(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    for _ in 0..rng.random_range(0..4) {
        let extra: Vec<char> = gen::text(rng, 1).chars().collect();
        let pos = rng.random_range(0..=chars.len());
        match (rng.random_range(0..3), extra.first()) {
            (0, Some(&c)) if chars.len() < 30 => chars.insert(pos, c),
            (1, _) if pos < chars.len() => {
                chars.remove(pos);
            }
            (_, Some(&c)) if pos < chars.len() => chars[pos] = c,
            _ => {}
        }
    }
    chars.into_iter().collect()
}

fn hermetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("corpus");
    let pairs = write_labeled_dataset(&root, "book", 5, (200, 260), 31).map_err(|e| e.to_string())?;
    let seeds: Vec<PageDetections> = pairs
        .iter()
        .map(|(p, ann)| PageDetections {
            doc_id: p.doc_id.clone(),
            page_number: p.page_number,
            detections: ann
                .regions
                .iter()
                .enumerate()
                .map(|(j, r)| Detection { class: r.class, bbox: r.bbox, confidence: 0.2 + 0.1 * (j % 8) as f64 })
                .collect(),
        })
        .collect();
    fs::write(dir.path().join("seeds.json"), serde_json::to_string(&seeds).unwrap()).map_err(|e| e.to_string())?;
    let manifest = DatasetManifest { pages: pairs.iter().map(|(p, _)| p.clone()).collect() };
    manifest.save(&root, &root.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let config_path = dir.path().join("pipeline.toml");
    fs::write(
        &config_path,
        "output = \"out\"\nworkers = 2\n\n[corpus]\nroot = \"corpus\"\n\n[detector]\nkind = \"stub\"\nweights = \"seeds.json\"\n\n\
         [classifier]\nkind = \"stub\"\n\n[scorer]\nkind = \"stub\"\n\n[ocr.stub]\nkind = \"stub\"\nstub_text = \"in principio\"\n",
    )
    .map_err(|e| e.to_string())?;

    let run_once = |out: &Path| -> Result<(Vec<PageRecord>, String), String> {
        let cfg = validate_config(load_config(Some(&config_path)).map_err(|e| e.to_string())?).map_err(|e| format!("{e:?}"))?;
        let (records, _) = run_from_config(&cfg).map_err(|e| e.to_string())?;
        emit_records(&records, out, RecordFormat::Json).map_err(|e| e.to_string())?;
        Ok((records, cfg.hash))
    };
    let (a, hash_a) = run_once(&dir.path().join("emit_a"))?;
    let (b, hash_b) = run_once(&dir.path().join("emit_b"))?;
    ensure(a.len() == 5, || format!("{} records", a.len()))?;
    for r in &a {
        r.validate().map_err(|e| format!("{}_p{}: {e}", r.doc_id, r.page_number))?;
    }
    let back = read_records_json(&dir.path().join("emit_a")).map_err(|e| e.to_string())?;
    ensure(back == a, || "JSON round trip changed the records".into())?;
    ensure(hash_a == hash_b, || "config hash changed between runs".into())?;
    let strip = |rs: &[PageRecord]| rs.iter().map(PageRecord::without_timestamps).collect::<Vec<_>>();
    ensure(strip(&a) == strip(&b), || "records differ between runs".into())?;
    let detections: usize = a.iter().map(|r| r.detections.len()).sum();
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("runtime {elapsed:?} >= 30 s"))?;
    Ok(format!(
        "5 valid records ({detections} detections), JSON round trip exact, 2 runs identical under hash {}, {:.2} s (limit 30 s)",
        &hash_a[..12],
        elapsed.as_secs_f64()
    ))
}

fn trainability() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_labeled_dataset(&tmp.path().join("train"), "tr", 12, (240, 320), 400).map_err(|e| e.to_string())?;
    write_labeled_dataset(&tmp.path().join("test"), "te", 8, (240, 320), 4000).map_err(|e| e.to_string())?;
    let train = DetectionDataset::load_dir(&tmp.path().join("train")).map_err(|e| e.to_string())?;
    let test = DetectionDataset::load_dir(&tmp.path().join("test")).map_err(|e| e.to_string())?;
    let trained = train_detector(Box::new(BlobDetector::default()), TrainingStrategy::CustomOnly, None, &train, &Hyperparams::new())
        .map_err(|e| e.to_string())?;
    let dets = test.samples.iter().map(|s| detect_page(&trained, &s.page)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let gts: Vec<_> = test.samples.iter().map(|s| s.annotation.clone()).collect();
    let curve = f1_confidence_curve(&dets, &gts, EvalOptions::default(), None).map_err(|e| e.to_string())?;
    let best = best_operating_point(&curve).map_err(|e| e.to_string())?;
    ensure(best.mean_f1 >= 0.9, || format!("detector mean F1 {:.4} < 0.9", best.mean_f1))?;

    let crops_dir = tmp.path().join("crops");
    for s in PictureSubclass::ALL {
        let sub = crops_dir.join(s.name());
        fs::create_dir_all(&sub).map_err(|e| e.to_string())?;
        for i in 0..20u64 {
            subclass_texture(s, 500 + i, 48).save(sub.join(format!("{i:03}.png"))).map_err(|e| e.to_string())?;
        }
    }
    let crops = load_labeled_crops(&crops_dir).map_err(|e| e.to_string())?;
    let (_, report) =
        train_subclassifier(Box::new(CentroidClassifier::new()), &crops, &Hyperparams::new(), 11).map_err(|e| e.to_string())?;
    let acc = report.accuracy.ok_or("no held-out crops")?;
    ensure(acc >= 0.95, || format!("held-out accuracy {acc:.4} < 0.95"))?;
    Ok(format!(
        "blob detector mean F1 {:.4} at t={:.3} (min 0.9); centroid held-out accuracy {acc:.4} on {} crops (min 0.95)",
        best.mean_f1, best.threshold, report.total
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("evaluation-oracle-equivalence", eval_oracle_equivalence),
        ("matching-conservation", matching_conservation),
        ("remap-conservation", remap_conservation),
        ("split-exactness-determinism", split_exactness),
        ("geometry-crop-bounds", geometry_bounds),
        ("cer-oracle", cer_oracle),
        ("hermetic-end-to-end", hermetic_end_to_end),
        ("trainability-smoke (optional)", trainability),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
