use sepdiff_wasm::{schedule_curves_json, separate_json, speaker_loss_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn schedule_curves_have_one_entry_per_level() {
    let v = parse(schedule_curves_json(200, 1e-4, 2e-2).unwrap());
    let ab = v["alpha_bar"].as_array().unwrap();
    assert_eq!(ab.len(), 201);
    assert!((ab[200].as_f64().unwrap() - 0.132_182_754_250_617_8).abs() < 1e-12);
    assert_eq!(v["sigma_post"][1], 0.0);
    assert!(schedule_curves_json(0, 1e-4, 2e-2).is_err());
}

#[test]
fn guided_separation_beats_unguided_on_average() {
    let mean = |v: &Value| -> f64 {
        let s = v["si_sdr_db"].as_array().unwrap();
        s.iter().map(|x| x.as_f64().unwrap()).sum::<f64>() / s.len() as f64
    };
    let (mut guided_total, mut plain_total) = (0.0, 0.0);
    for id in 0..6 {
        let guided = parse(separate_json(id, true, 50.0).unwrap());
        let plain = parse(separate_json(id, false, 50.0).unwrap());
        assert_eq!(guided["loss_trace"].as_array().unwrap().len(), 101);
        assert!(plain["loss_trace"].as_array().unwrap().is_empty());
        let y = guided["mixture"].as_array().unwrap();
        let e = guided["estimates"].as_array().unwrap();
        for i in 0..y.len() {
            let s = e[0][i].as_f64().unwrap() + e[1][i].as_f64().unwrap();
            assert!((s - y[i].as_f64().unwrap()).abs() < 1e-9);
        }
        guided_total += mean(&guided);
        plain_total += mean(&plain);
    }
    // single mixtures can go either way; the average should not
    assert!(guided_total > plain_total + 6.0 * 3.0, "{guided_total} vs {plain_total}");
}

#[test]
fn leaking_raises_the_speaker_loss() {
    let v = parse(speaker_loss_json(120.0, 700.0, 6).unwrap());
    let loss: Vec<f64> = v["loss"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(loss.len(), 6);
    assert!(loss[5] > loss[0]);
    assert!(speaker_loss_json(120.0, 700.0, 1).is_err());
    assert!(speaker_loss_json(5000.0, 700.0, 3).is_err());
}
