//! Module invariants as property tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use fetalflow_core::config::{image_from_path, EngineConfig};
use fetalflow_core::coordinator::{build_plan, identify_plane, IntentParser, IntentRule, RuleIntentParser};
use fetalflow_core::domain::{
    BiometryValue, ClassDistribution, ExpertResult, ImageRef, ImageSource, Mask, Measure, Payload, PlaneLabel, Query,
    TaskType, Unit,
};
use fetalflow_core::fusion::FusionRuleId;
use fetalflow_core::geometry::{
    compute_aop, fit_ellipse, measure_hc_ac, AoPInputs, EllipseParams,
};
use fetalflow_core::json::canonical_json;
use fetalflow_core::metrics::{classification_metrics, cohen_kappa, segmentation_metrics, segmentation_scores, ClassPrediction, ClassificationCase};
use fetalflow_core::mocks::{MockBehavior, MockSpec, MockTool};
use fetalflow_core::protocol::{BuiltinSet, BuiltinTool, ExpertSpec, Registry, ToolClient, ToolRequest, ToolSpec};
use fetalflow_core::summarizer::{metadata_line, numerals, payload_numbers, render, Format};
use proptest::prelude::*;

fn testdata() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata")
}

fn ellipse_points(e: &EllipseParams, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|i| e.point_at(2.0 * PI * i as f64 / n as f64)).collect()
}

fn angle_diff_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

fn arb_mask_pair(max: u32) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        let n = (w * h) as usize;
        (
            prop::collection::vec(prop::bool::weighted(0.4), n),
            prop::collection::vec(prop::bool::weighted(0.4), n),
        )
            .prop_map(move |(a, b)| (Mask::from_raster(w, h, &a).unwrap(), Mask::from_raster(w, h, &b).unwrap()))
    })
}

fn dilate(m: &Mask) -> Mask {
    let (w, h) = (m.width() as i64, m.height() as i64);
    Mask::from_fn(m.width(), m.height(), |x, y| {
        let (x, y) = (x as i64, y as i64);
        [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            nx >= 0 && ny >= 0 && nx < w && ny < h && m.contains(nx as u32, ny as u32)
        })
    })
    .unwrap()
}

fn request(id: &str, task: TaskType, w: u32, h: u32) -> ToolRequest {
    let image = ImageRef::new(id, ImageSource::Path(format!("/img/{id}.png")), w, h).unwrap();
    serde_json::from_value(serde_json::json!({
        "request_id": format!("r-{id}"),
        "task": task,
        "prompt": {"task": task, "instructions": "x", "params": {}},
        "image": image,
        "params": {},
    }))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(std::env::var("PROPTEST_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(128)))]

    #[test]
    fn ellipse_fit_is_rigid_motion_equivariant(
        a in 20.0f64..100.0,
        ratio in 0.5f64..0.95,
        theta in 0.0f64..PI,
        cx in -50.0f64..50.0,
        cy in -50.0f64..50.0,
        phi in -PI..PI,
        tx in -100.0f64..100.0,
        ty in -100.0f64..100.0,
    ) {
        let e = EllipseParams::new((cx, cy), a, a * ratio, theta);
        let pts = ellipse_points(&e, 48);
        let (s, c) = phi.sin_cos();
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (c * x - s * y + tx, s * x + c * y + ty)).collect();
        let f0 = fit_ellipse(&pts).unwrap().ellipse;
        let f1 = fit_ellipse(&moved).unwrap().ellipse;
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
        prop_assert!(rel(f1.semi_major, f0.semi_major) < 1e-9);
        prop_assert!(rel(f1.semi_minor, f0.semi_minor) < 1e-9);
        let want = (c * f0.center.0 - s * f0.center.1 + tx, s * f0.center.0 + c * f0.center.1 + ty);
        prop_assert!((f1.center.0 - want.0).abs() < 1e-9 * 200.0 && (f1.center.1 - want.1).abs() < 1e-9 * 200.0);
        prop_assert!(angle_diff_mod_pi(f1.rotation, f0.rotation + phi) < 1e-9);
    }

    #[test]
    fn dilation_never_shrinks_circumference(
        a in 8.0f64..40.0,
        ratio in 0.5f64..1.0,
        theta in 0.0f64..PI,
    ) {
        let e = EllipseParams::new((50.0, 50.0), a, a * ratio, theta);
        let m = Mask::from_fn(100, 100, |x, y| e.level(x as f64, y as f64) <= 1.0).unwrap();
        let before = measure_hc_ac(&m, Some(1.0), Measure::HC).unwrap().value.value;
        let after = measure_hc_ac(&dilate(&m), Some(1.0), Measure::HC).unwrap().value.value;
        prop_assert!(after >= before, "{} < {}", after, before);
    }

    #[test]
    fn segmentation_score_identities((p, t) in arb_mask_pair(16)) {
        let s = segmentation_scores(&p, &t).unwrap();
        for v in [s.dsc, s.iou, s.ppv, s.sensitivity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.dsc >= s.iou);
        prop_assert!((s.dsc - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        if let (Some(hd95), Some(hd)) = (s.hd95, s.hausdorff) {
            prop_assert!(hd95 <= hd + 1e-12);
        }
    }

    #[test]
    fn kappa_never_exceeds_accuracy(cells in prop::collection::vec(0u64..6, 9)) {
        let m: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
        let n: u64 = cells.iter().sum();
        prop_assume!(n > 0);
        let acc = (0..3).map(|i| m[i][i]).sum::<u64>() as f64 / n as f64;
        let p_e: f64 = (0..3)
            .map(|i| m[i].iter().sum::<u64>() as f64 * m.iter().map(|r| r[i]).sum::<u64>() as f64)
            .sum::<f64>() / (n * n) as f64;
        prop_assume!(p_e > 0.0 && p_e < 1.0);
        prop_assert!(cohen_kappa(&m) <= acc + 1e-12);
    }

    #[test]
    fn metrics_ignore_case_order(
        masks in prop::collection::vec(arb_mask_pair(10), 1..6),
        labels in prop::collection::vec((0usize..3, 0usize..3), 1..20),
        rot in 0usize..20,
    ) {
        let pairs: Vec<(String, Mask, Mask)> = masks
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| a.width() == b.width())
            .map(|(i, (a, b))| (format!("c{i}"), a.clone(), b.clone()))
            .collect();
        let mut rotated = pairs.clone();
        rotated.reverse();
        let k = rot % rotated.len().max(1);
        rotated.rotate_left(k);
        prop_assert_eq!(segmentation_metrics(&pairs).ok(), segmentation_metrics(&rotated).ok());

        let planes = [PlaneLabel::Abdomen, PlaneLabel::Brain, PlaneLabel::Femur];
        let cases: Vec<ClassificationCase> = labels
            .iter()
            .map(|&(p, t)| ClassificationCase { pred: ClassPrediction::Label(planes[p]), truth: planes[t] })
            .collect();
        let mut shuffled = cases.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(classification_metrics(&cases).ok(), classification_metrics(&shuffled).ok());
    }

    #[test]
    fn equal_priority_rules_commute(order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), pick in 0usize..6) {
        let words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];
        let tasks = [
            TaskType::HCMeasurement, TaskType::ACMeasurement, TaskType::AoP,
            TaskType::GAEstimation, TaskType::HeadSegmentation, TaskType::StomachSegmentation,
        ];
        let rules = |idx: &[usize]| {
            RuleIntentParser::new(
                idx.iter().map(|&i| IntentRule { pattern: words[i].into(), task: tasks[i], priority: 10 }).collect(),
            )
            .unwrap()
        };
        let image = ImageRef::new("i", ImageSource::Path("/i.png".into()), 8, 8).unwrap();
        let q = Query::image(format!("please {} now", words[pick].to_uppercase()), image);
        let base = rules(&[0, 1, 2, 3, 4, 5]).classify(&q);
        prop_assert_eq!(base, tasks[pick]);
        prop_assert_eq!(rules(&order).classify(&q), base);
    }

    #[test]
    fn plane_choice_survives_weight_scaling(
        weights in prop::collection::vec(0.1f64..5.0, 3),
        scale in 0.01f64..100.0,
        probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3),
    ) {
        let labels = [PlaneLabel::Abdomen, PlaneLabel::Brain, PlaneLabel::Thorax];
        let mut builtins = BuiltinSet::new();
        for (i, row) in probs.iter().enumerate() {
            let w: BTreeMap<PlaneLabel, f64> = labels.iter().zip(row).map(|(l, p)| (*l, p + 0.01)).collect();
            let spec = MockSpec::constant(Payload::Classification(ClassDistribution::normalized(w).unwrap()));
            let tool: Arc<dyn BuiltinTool> = Arc::new(MockTool::new(spec));
            builtins.insert(format!("m{i}"), tool);
        }
        let client = ToolClient::new(builtins);
        let registry = |k: f64| {
            let tools = (0..3)
                .map(|i| ToolSpec::builtin(format!("t{i}"), &[TaskType::PlaneClassification], format!("m{i}")).with_weight(weights[i] * k))
                .collect();
            Registry::new(vec![ExpertSpec::new("plane", TaskType::PlaneClassification, tools, FusionRuleId::WeightedVote)]).unwrap()
        };
        let image = ImageRef::new("i", ImageSource::Path("/i.png".into()), 8, 8).unwrap();
        let a = identify_plane(&image, &registry(1.0), &client).unwrap();
        let b = identify_plane(&image, &registry(scale), &client).unwrap();
        prop_assert_eq!(a.plane, b.plane);
    }

    #[test]
    fn plans_ignore_registry_order(order in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(), plane in 0usize..3) {
        let tasks = [TaskType::HeadSegmentation, TaskType::HCMeasurement, TaskType::GAEstimation, TaskType::AbdomenSegmentation];
        let rules = [FusionRuleId::PixelMajority, FusionRuleId::ScalarMedian, FusionRuleId::ScalarMedian, FusionRuleId::PixelMajority];
        let experts = |idx: &[usize]| {
            Registry::new(
                idx.iter()
                    .map(|&i| ExpertSpec::new(
                        format!("e{i}"),
                        tasks[i],
                        vec![ToolSpec::builtin(format!("t{i}"), &[tasks[i]], "x")],
                        rules[i],
                    ))
                    .collect(),
            )
            .unwrap()
        };
        let planes = [PlaneLabel::Brain, PlaneLabel::TransCerebellar, PlaneLabel::Femur];
        let image = ImageRef::new("i", ImageSource::Path("/i.png".into()), 8, 8).unwrap();
        let q = Query::image("describe", image);
        let a = build_plan(&q, TaskType::ImageCaption, Some(planes[plane]), &experts(&[0, 1, 2, 3]));
        let b = build_plan(&q, TaskType::ImageCaption, Some(planes[plane]), &experts(&order));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mocks_are_pure(seed in any::<u64>(), id in "[a-z]{1,8}", base in 100.0f64..300.0) {
        let noisy = MockTool::new(MockSpec::new(MockBehavior::Noisy {
            base: Payload::Biometry(BiometryValue::new(Measure::HC, base, Unit::Mm, "regression", 0.9).unwrap()),
            seed,
            scale: 0.1,
        }));
        let ellipse = MockTool::new(MockSpec::new(MockBehavior::SyntheticEllipse {
            center: (10.0, 8.0), semi_axes: (6.0, 4.0), rotation: 0.3,
        }));
        let rq = request(&id, TaskType::HCMeasurement, 20, 16);
        let sq = request(&id, TaskType::HeadSegmentation, 20, 16);
        prop_assert_eq!(canonical_json(&noisy.call("n", &rq)).unwrap(), canonical_json(&noisy.call("n", &rq)).unwrap());
        let fresh = MockTool::new(noisy.spec().clone());
        prop_assert_eq!(canonical_json(&noisy.call("n", &rq)).unwrap(), canonical_json(&fresh.call("n", &rq)).unwrap());
        prop_assert_eq!(canonical_json(&ellipse.call("e", &sq)).unwrap(), canonical_json(&ellipse.call("e", &sq)).unwrap());
    }

    #[test]
    fn fan_out_is_schedule_independent(n in 1usize..8, limit in 1usize..8, fail in prop::collection::vec(any::<bool>(), 8)) {
        let mut builtins = BuiltinSet::new();
        for i in 0..n {
            let spec = if fail[i] {
                MockSpec::new(MockBehavior::Fail { message: "down".into() })
            } else {
                MockSpec::constant(Payload::Classification(ClassDistribution::certain(PlaneLabel::ALL[i % 6])))
            };
            let tool: Arc<dyn BuiltinTool> = Arc::new(MockTool::new(spec));
            builtins.insert(format!("m{i}"), tool);
        }
        // Registered in reverse so sorting is observable.
        let tools: Vec<ToolSpec> = (0..n).rev()
            .map(|i| ToolSpec::builtin(format!("t{i}"), &[TaskType::PlaneClassification], format!("m{i}")))
            .collect();
        let expert = ExpertSpec::new("p", TaskType::PlaneClassification, tools, FusionRuleId::WeightedVote).with_min_successes(0);
        let req = request("img", TaskType::PlaneClassification, 4, 4);
        let serial = ToolClient::new(builtins.clone()).with_parallelism(1).invoke_all(&expert, &req).unwrap();
        let wide = ToolClient::new(builtins).with_parallelism(limit).invoke_all(&expert, &req).unwrap();
        prop_assert_eq!(&serial, &wide);
        let ids: Vec<&str> = serial.iter().map(|r| r.tool_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        prop_assert_eq!(ids, sorted);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn aop_is_scale_free(d in 40.0f64..70.0, r_frac in 0.35f64..0.8, tilt in -0.4f64..0.4) {
        // Symphysis along +x ending at the vertex; head disk ahead and above.
        let build = |k: f64| {
            let size = (260.0 * k) as u32;
            let vertex = (60.0 * k, 160.0 * k);
            let r = d * r_frac * k;
            let dir = (tilt.cos(), -tilt.sin().abs() - 0.6);
            let norm = dir.0.hypot(dir.1);
            let centre = (vertex.0 + d * k * dir.0 / norm, vertex.1 + d * k * dir.1 / norm);
            let sym = Mask::from_fn(size, size, |x, y| {
                let (x, y) = (x as f64, y as f64);
                x >= vertex.0 - 40.0 * k && x <= vertex.0 && (y - vertex.1).abs() <= 2.0 * k
            })
            .unwrap();
            let head = Mask::from_fn(size, size, |x, y| (x as f64 - centre.0).hypot(y as f64 - centre.1) <= r).unwrap();
            AoPInputs::new(sym, head).ok().and_then(|i| compute_aop(&i).ok()).map(|g| g.degrees)
        };
        let (Some(small), Some(large)) = (build(1.0), build(2.0)) else {
            return Err(TestCaseError::reject("degenerate configuration"));
        };
        prop_assert!((small - large).abs() < 0.5, "{} vs {}", small, large);
    }

    #[test]
    fn markdown_numbers_trace_to_payloads(
        hc in prop::collection::vec(120.0f64..420.0, 1..4),
        ga in 15.0f64..39.0,
        video in any::<bool>(),
    ) {
        let mut cfg = EngineConfig::load(&testdata().join("config/mock.json")).unwrap();
        let hc_expert = cfg.experts.iter_mut().find(|e| e.expert_id == "hc").unwrap();
        hc_expert.tools.clear();
        for (i, v) in hc.iter().enumerate() {
            let name = format!("hc_{i}");
            cfg.mocks.insert(name.clone(), MockSpec::constant(Payload::Biometry(
                BiometryValue::new(Measure::HC, *v, Unit::Mm, "regression", 0.9).unwrap(),
            )));
            hc_expert.tools.push(ToolSpec::builtin(name.clone(), &[TaskType::HCMeasurement], name));
        }
        cfg.mocks.insert("ga_a".into(), MockSpec::constant(Payload::Biometry(
            BiometryValue::new(Measure::GA, ga, Unit::Weeks, "regression", 0.8).unwrap(),
        )));
        let engine = cfg.build().unwrap();
        let report = if video {
            let m = fetalflow_core::config::VideoManifest::load(&testdata().join("video/manifest.json")).unwrap();
            engine.summarize_video(&Query::video("summary", m.stream().unwrap())).unwrap().report
        } else {
            let img = image_from_path(&testdata().join("images/head.png"), Some(0.5)).unwrap();
            engine.analyze(&Query::image("describe", img)).unwrap().report
        };
        let md = String::from_utf8(render(&report, Format::Markdown)).unwrap();
        let md = md.replace(&metadata_line(&report), "");
        let known: Vec<f64> = report.sections.iter().flat_map(|s| payload_numbers(&s.payload)).collect();
        for n in numerals(&md) {
            prop_assert!(known.contains(&n), "{} has no payload field\n{}", n, md);
        }
    }
}

#[test]
fn synthetic_ellipse_area_converges() {
    let tool = MockTool::new(MockSpec::new(MockBehavior::SyntheticEllipse {
        center: (120.0, 120.0),
        semi_axes: (100.0, 100.0),
        rotation: 0.0,
    }));
    let res = tool.call("e", &request("big", TaskType::HeadSegmentation, 241, 241));
    let Some(Payload::Mask(m)) = res.payload else { panic!("{res:?}") };
    let area = m.area() as f64;
    let exact = PI * 100.0 * 100.0;
    assert!((area - exact).abs() / exact < 0.005, "{area} vs {exact}");
}

#[test]
fn crashing_tool_is_contained() {
    struct Boom;
    impl BuiltinTool for Boom {
        fn call(&self, _: &str, _: &ToolRequest) -> ExpertResult {
            panic!("segfault in model")
        }
    }
    let mut builtins = BuiltinSet::new();
    builtins.insert("boom".into(), Arc::new(Boom) as Arc<dyn BuiltinTool>);
    builtins.insert("ok".into(), Arc::new(MockTool::new(MockSpec::constant(Payload::Classification(ClassDistribution::certain(PlaneLabel::Brain))))) as Arc<dyn BuiltinTool>);
    let expert = ExpertSpec::new(
        "p",
        TaskType::PlaneClassification,
        vec![
            ToolSpec::builtin("a", &[TaskType::PlaneClassification], "boom"),
            ToolSpec::builtin("b", &[TaskType::PlaneClassification], "ok"),
        ],
        FusionRuleId::WeightedVote,
    );
    let out = ToolClient::new(builtins).invoke_all(&expert, &request("i", TaskType::PlaneClassification, 4, 4)).unwrap();
    assert!(!out[0].is_ok() && out[1].is_ok());
}
