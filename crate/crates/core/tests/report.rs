use unitlens::ablation::{CampaignResult, UnitImpactMatrix, UnitRef};
use unitlens::activations::{ActivationMatrix, CaptureProvenance, LayerRange};
use unitlens::embedding::{Axis, Embedding2D, EmbeddingMeta, UmapParams};
use unitlens::metrics::*;
use unitlens::nn::{Arch, EvalReport, LayerTag};
use unitlens::report::*;
use unitlens::Error;

fn embedding(coords: Vec<[f64; 2]>, labels: Vec<Option<u8>>) -> Embedding2D {
    let n = coords.len();
    Embedding2D {
        meta: EmbeddingMeta {
            id: "test".into(),
            axis: Axis::Horizontal,
            source_layer: None,
            params: UmapParams::default(),
            n_epochs: 0,
            a: 1.0,
            b: 1.0,
            lineage: None,
            saturated_points: 0,
        },
        coords,
        point_ids: (0..n).collect(),
        labels,
        layers: vec![None; n],
    }
}

fn circles(svg: &str) -> Vec<(f64, f64, Option<String>, String)> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants()
        .filter(|n| n.has_tag_name("circle"))
        .map(|n| {
            let group = n.parent_element().unwrap().attribute("id").unwrap().to_string();
            (
                n.attribute("cx").unwrap().parse().unwrap(),
                n.attribute("cy").unwrap().parse().unwrap(),
                n.attribute("fill").map(String::from),
                group,
            )
        })
        .collect()
}

fn figure(e: &Embedding2D) -> FigureSpec<'_> {
    FigureSpec {
        title: "fc1 <test> & more".into(),
        embedding: e,
        scheme: ColorScheme::ByClass,
        overlay: vec![],
        annotation: Some("NH = 0.912".into()),
    }
}

#[test]
fn empty_embedding_renders_without_points() {
    let e = embedding(vec![], vec![]);
    let svg = render_scatter(&figure(&e)).unwrap();
    assert!(circles(&svg).is_empty());
    assert!(svg.contains(r#"data-count="0""#));
}

#[test]
fn three_points_map_through_the_viewport() {
    let e = embedding(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]], vec![Some(0), Some(1), Some(2)]);
    let svg = render_scatter(&figure(&e)).unwrap();
    let c = circles(&svg);
    assert_eq!(c.len(), 3);
    // x spans 2, y spans 1: scale = side / 2, y band centered
    let side = WIDTH - 2.0 * MARGIN;
    let s = side / 2.0;
    let off_y = (side - s) / 2.0;
    let expect = [
        (MARGIN, TOP + side - off_y),
        (MARGIN + 2.0 * s, TOP + side - off_y),
        (MARGIN, TOP + side - off_y - s),
    ];
    for ((x, y, fill, _), (ex, ey)) in c.iter().zip(expect) {
        assert!((x - ex).abs() <= 5e-4 && (y - ey).abs() <= 5e-4, "({x}, {y}) vs ({ex}, {ey})");
        assert!(fill.is_some());
    }
    let vp = Viewport::fit(&e.coords);
    for ((x, y, _, _), p) in c.iter().zip(&e.coords) {
        let back = vp.to_data([*x, *y]);
        assert!((back[0] - p[0]).abs() < 1e-5 && (back[1] - p[1]).abs() < 1e-5);
    }
    assert_eq!(c[1].2.as_deref(), Some(hex(CLASS_PALETTE[1]).as_str()));
    assert!(svg.contains("fc1 &lt;test&gt; &amp; more"));
    assert!(svg.contains("NH = 0.912"));
}

#[test]
fn rendering_is_byte_identical_and_overlay_is_black() {
    let coords: Vec<[f64; 2]> = (0..50).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let labels = (0..50).map(|i| Some((i % 10) as u8)).collect();
    let e = embedding(coords, labels);
    let mut f = figure(&e);
    f.overlay = vec![3, 17];
    let a = render_scatter(&f).unwrap();
    assert_eq!(a, render_scatter(&f).unwrap());
    let c = circles(&a);
    assert_eq!(c.len(), 52);
    let over: Vec<_> = c.iter().filter(|x| x.3 == "overlay").collect();
    assert_eq!(over.len(), 2);
    assert_eq!((over[0].0, over[0].1), (c[3].0, c[3].1));
    assert!(a.contains(r##"id="overlay" stroke="none" fill="#000000""##));
}

#[test]
fn palette_mismatches_are_errors() {
    let e = embedding(vec![[0.0, 0.0], [1.0, 1.0]], vec![Some(0), None]);
    assert!(matches!(render_scatter(&figure(&e)), Err(Error::InvalidArgument(_))));
    let mut f = figure(&e);
    f.scheme = ColorScheme::ByLayer;
    assert!(render_scatter(&f).is_err());
    f.scheme = ColorScheme::ByAs {
        class: 0,
        selectivity: vec![0.5],
        argmax: vec![0],
    };
    assert!(render_scatter(&f).is_err());
    let ok = embedding(vec![[0.0, 0.0], [1.0, 1.0]], vec![Some(0), Some(1)]);
    let mut f = figure(&ok);
    f.overlay = vec![2];
    assert!(render_scatter(&f).is_err());
}

#[test]
fn selectivity_schemes_grey_out_other_classes() {
    let mut e = embedding(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![None; 4]);
    e.layers = vec![Some(LayerTag::Fc1); 4];
    let scheme = ColorScheme::ByAs {
        class: 2,
        selectivity: vec![1.0, 0.5, 0.9, 0.0],
        argmax: vec![2, 2, 4, 2],
    };
    let c = scheme.colors(&e).unwrap();
    assert_eq!(c[0], CLASS_PALETTE[2]);
    assert_eq!(c[1], saturate(CLASS_PALETTE[2], 0.5));
    assert_eq!(c[2], UNSELECTED);
    assert_eq!(c[3], UNSELECTED);
    let aes = ColorScheme::ByAes {
        class: 1,
        magnitude: vec![1.0, 0.25, 1.0, 1.0],
        sign: vec![Impact::Negative, Impact::Positive, Impact::Negative, Impact::None],
        argmax: vec![1, 1, 0, 1],
    };
    let c = aes.colors(&e).unwrap();
    assert_eq!(c[0], NEGATIVE_IMPACT);
    assert_eq!(c[1], saturate(POSITIVE_IMPACT, 0.25));
    assert_eq!(c[2], UNSELECTED);
    assert_eq!(c[3], UNSELECTED);
}

#[test]
fn kernel_impact_spreads_over_its_columns() {
    let arch = Arch::tiny(2, 4);
    let plane = 14 * 14;
    let cols = 2 * plane + 4;
    let m = ActivationMatrix {
        rows: 1,
        cols,
        values: vec![0.0; cols],
        layers: vec![
            LayerRange {
                layer: LayerTag::Conv1,
                start: 0,
                end: 2 * plane,
            },
            LayerRange {
                layer: LayerTag::Fc1,
                start: 2 * plane,
                end: cols,
            },
        ],
        row_index: vec![0],
        labels: vec![0],
        out: None,
        out_width: 0,
        provenance: CaptureProvenance::default(),
    };
    let mut d = [0.0; 10];
    d[5] = -0.1;
    let impact = UnitImpactMatrix {
        units: vec![UnitRef { layer: LayerTag::Conv1, unit: 1 }, UnitRef { layer: LayerTag::Fc1, unit: 3 }],
        deltas: vec![d, d],
        baseline_per_class: [0.9; 10],
        images: 10,
    };
    let recs = ablation_effect_selectivity(&impact, AesPeak::Magnitude);
    let ColorScheme::ByAes { sign, argmax, .. } = ColorScheme::by_aes(5, &m.layers, &arch, &recs).unwrap() else {
        panic!()
    };
    assert!(sign[..plane].iter().all(|&s| s == Impact::None));
    assert!(sign[plane..2 * plane].iter().all(|&s| s == Impact::Negative));
    assert!(argmax[plane..2 * plane].iter().all(|&c| c == 5));
    assert_eq!(sign[2 * plane + 3], Impact::Negative);
    assert_eq!(sign[2 * plane + 2], Impact::None);
}

fn campaign(layer: LayerTag, change: [f64; 10]) -> CampaignResult {
    CampaignResult {
        layer,
        fraction: 0.5,
        trials: 10,
        seed: 1,
        images: 1000,
        baseline_overall: 0.98,
        baseline_per_class: [0.98; 10],
        per_trial: vec![],
        mean_change_pp: change,
        mean_overall_change_pp: change.iter().sum::<f64>() / 10.0,
    }
}

#[test]
fn stacked_bars_have_one_row_per_class() {
    let zero = stacked_bar_data(&[campaign(LayerTag::Conv1, [0.0; 10]), campaign(LayerTag::Fc1, [0.0; 10])]).unwrap();
    let lines: Vec<&str> = zero.lines().collect();
    assert_eq!(lines[0], "class,conv1,fc1");
    assert_eq!(lines.len(), 11);
    assert!(lines[1..].iter().enumerate().all(|(c, l)| *l == format!("{c},0,0")));

    let change = [-30.9, -0.4, -2.0, -1.5, -3.25, 0.0, -1.0, -7.0, -2.5, -0.125];
    let one = stacked_bar_data(&[campaign(LayerTag::Conv2, change)]).unwrap();
    let mut r = csv::Reader::from_reader(one.as_bytes());
    for (c, rec) in r.records().enumerate() {
        let v: f64 = rec.unwrap()[1].parse().unwrap();
        assert_eq!(v, change[c]);
    }
    assert!(stacked_bar_data(&[campaign(LayerTag::Fc1, change), campaign(LayerTag::Fc1, change)]).is_err());
}

fn inputs<'a>(
    eval: &'a EvalReport,
    campaigns: &'a [CampaignResult],
    data: &'a Embedding2D,
    layers: &'a [Embedding2D],
    sel: &'a [SelectivityRecord],
    imp: &'a [ImpactRecord],
) -> ReportInputs<'a> {
    ReportInputs {
        provenance: ReportProvenance {
            tool: "unitlens".into(),
            version: "0.1.0".into(),
            master_seed: 7,
            config_sha256: "ab".repeat(32),
            checkpoint_sha256: "cd".repeat(32),
            dataset: "synthetic".into(),
            config: serde_json::json!({"seed": 7}),
        },
        eval,
        campaigns,
        data_embedding: Some(data),
        layer_embeddings: layers,
        selectivity: Some(sel),
        impact: Some(imp),
        ablated: None,
        nh_k: 6,
        artifacts: vec![ArtifactRef {
            name: "checkpoint".into(),
            path: "model.ulck".into(),
            sha256: "cd".repeat(32),
        }],
    }
}

#[test]
fn analysis_report_validates_and_reuses_metrics() {
    let labels: Vec<u8> = (0..200).map(|i| (i % 10) as u8).collect();
    let preds: Vec<u8> = labels.iter().enumerate().map(|(i, &l)| if i % (3 + l as usize) == 0 { (l + 1) % 10 } else { l }).collect();
    let idx: Vec<usize> = (0..200).collect();
    let eval = EvalReport::from_predictions(&preds, &labels, &idx, 0.1);
    let coords: Vec<[f64; 2]> = (0..200)
        .map(|i| {
            let l = labels[i] as f64;
            [l * 3.0 + (i as f64 * 0.7).sin() * (1.0 + l * 0.3), (i as f64 * 1.3).cos()]
        })
        .collect();
    let data = embedding(coords.clone(), labels.iter().map(|&l| Some(l)).collect());
    let mut fc1 = embedding(coords.iter().map(|p| [p[0] * 0.5, p[1]]).collect(), data.labels.clone());
    fc1.meta.id = "horizontal/fc1".into();
    fc1.meta.source_layer = Some(LayerTag::Fc1);
    let layers = vec![fc1];
    let change: [f64; 10] = std::array::from_fn(|c| -(c as f64) * 0.7 - 0.2);
    let campaigns = vec![campaign(LayerTag::Conv1, change)];
    let sel: Vec<SelectivityRecord> = (0..40)
        .map(|u| SelectivityRecord {
            unit: u,
            layer: Some(LayerTag::Fc1),
            class_means: [0.0; 10],
            selectivity: if u % 7 == 0 { 0.0 } else { 0.3 },
            argmax: ((u * u) % 10) as u8,
        })
        .collect();
    let deltas: Vec<[f64; 10]> = (0..30).map(|u| std::array::from_fn(|c| if c == u % 10 { -0.05 } else { 0.001 * (u % 4) as f64 - 0.001 })).collect();
    let impact = UnitImpactMatrix {
        units: (0..30).map(|unit| UnitRef { layer: LayerTag::Fc2, unit }).collect(),
        deltas,
        baseline_per_class: [0.9; 10],
        images: 200,
    };
    let imp = ablation_effect_selectivity(&impact, AesPeak::Magnitude);

    let report = analysis_report(inputs(&eval, &campaigns, &data, &layers, &sel, &imp)).unwrap();
    let json = report.to_json().unwrap();
    let again = analysis_report(inputs(&eval, &campaigns, &data, &layers, &sel, &imp)).unwrap().to_json().unwrap();
    assert_eq!(json, again);

    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let mut broken = value.clone();
    broken["accuracy"]["overall"] = serde_json::json!(1.5);
    assert!(!validator.is_valid(&broken));

    // cross-check against direct metric calls
    let error = per_class_error(&eval);
    let drop: Vec<f64> = change.iter().map(|c| -c).collect();
    let direct = spearman(&error, &drop).unwrap();
    let got = report.correlations.iter().find(|c| c.name == "error_vs_ablation_drop").unwrap();
    assert_eq!(got.result.as_ref().unwrap(), &direct);
    let nh_pc = embedding_nh_per_class(&data, 6).unwrap();
    let as_counts: Vec<f64> = selective_counts(&sel).iter().map(|&c| c as f64).collect();
    let direct = pearson(&as_counts, &nh_pc).unwrap();
    let got = report.correlations.iter().find(|c| c.name == "as_selective_units_vs_nh").unwrap();
    assert_eq!(got.result.as_ref().unwrap(), &direct);
    let aes_counts: Vec<f64> = selective_counts(&imp).iter().map(|&c| c as f64).collect();
    let got = report.correlations.iter().find(|c| c.name == "aes_selective_units_vs_nh").unwrap();
    match pearson(&aes_counts, &nh_pc) {
        Ok(r) => assert_eq!(got.result.as_ref().unwrap(), &r),
        Err(_) => assert!(got.error.is_some()),
    }
    assert_eq!(report.nh[0].nh, embedding_nh(&data, 6).unwrap());
    assert_eq!(report.nh[1].layer.as_deref(), Some("fc1"));
    assert_eq!(report.campaigns[0].most_affected_class, 9);
    assert_eq!(report.campaigns[0].least_affected_class, 0);
    assert!((report.campaigns[0].spread_pp - 6.3).abs() < 1e-12);
}
