use rand::Rng;
use synthlong::predictor::{
    featurize, predict, raw_features, select_lambda, train, FeatureSpec, LinearReadout, PredictorModel, TrainingMeta,
};
use synthlong::renderer::Image;
use synthlong::rng::rng_from_seed;

fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| Image::new(side, side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap())
        .collect()
}

fn meta() -> TrainingMeta {
    TrainingMeta { n_train: 0, seed: 0, sigma2: 0.0 }
}

#[test]
fn raw_feature_examples() {
    let flat = Image::filled(8, 8, 0.5).unwrap();
    assert!(raw_features(&flat, 4).unwrap().iter().all(|v| *v == 0.5));
    let checker = Image::new(8, 8, (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect()).unwrap();
    assert!(raw_features(&checker, 2).unwrap().iter().all(|v| *v == 0.5));
    assert!(raw_features(&flat, 3).is_err());

    let imgs = random_images(20, 4, 1);
    let spec = FeatureSpec::fit(&imgs, 1).unwrap();
    let f = featurize(&imgs[3], &spec).unwrap();
    for j in 0..16 {
        assert!((f[j] - (imgs[3].pixels()[j] - spec.mean[j]) / spec.std[j]).abs() < 1e-12);
    }
    assert!(featurize(&Image::filled(8, 8, 0.0).unwrap(), &spec).is_err());
}

#[test]
fn constant_pixels_are_dropped() {
    let mut imgs = random_images(10, 4, 2);
    for img in &mut imgs {
        let mut px = img.pixels().to_vec();
        px[0] = 0.25;
        *img = Image::new(4, 4, px).unwrap();
    }
    let spec = FeatureSpec::fit(&imgs, 1).unwrap();
    assert_eq!(spec.dropped, vec![0]);
    assert_eq!(spec.len(), 15);
    assert!(spec.std.iter().all(|s| *s > 0.0));
}

fn linear_targets(imgs: &[Image]) -> Vec<[f64; 3]> {
    imgs.iter()
        .map(|img| {
            let p = img.pixels();
            [
                p.iter().enumerate().map(|(j, v)| v * (j as f64 * 0.1 - 3.0)).sum::<f64>() + 1.0,
                p[5] - 2.0 * p[40],
                p.iter().sum::<f64>() * 0.01 - 0.3,
            ]
        })
        .collect()
}

#[test]
fn exact_interpolation_at_zero_lambda() {
    let imgs = random_images(200, 8, 3);
    let t = linear_targets(&imgs);
    let model = train(&imgs, &t, 0.0, 1, meta()).unwrap();
    let mut sse = 0.0;
    let mut sst = 0.0;
    for k in 0..3 {
        let m = t.iter().map(|r| r[k]).sum::<f64>() / t.len() as f64;
        for (img, r) in imgs.iter().zip(&t) {
            let p = predict(&model, img).unwrap();
            sse += (p[k] - r[k]).powi(2);
            sst += (r[k] - m).powi(2);
        }
    }
    assert!(1.0 - sse / sst > 1.0 - 1e-8);
    let p = predict(&model, &imgs[0]).unwrap();
    for k in 0..3 {
        assert!((p[k] - t[0][k]).abs() < 1e-6);
    }
    // fewer samples than features is singular without regularization
    assert!(train(&imgs[..30], &t[..30], 0.0, 1, meta()).is_err());
    assert!(train(&imgs[..30], &t[..30], 0.1, 1, meta()).is_ok());
}

#[test]
fn huge_lambda_predicts_target_means() {
    let imgs = random_images(100, 8, 4);
    let t = linear_targets(&imgs);
    let model = train(&imgs, &t, 1e12, 2, meta()).unwrap();
    let means: [f64; 3] = std::array::from_fn(|k| t.iter().map(|r| r[k]).sum::<f64>() / t.len() as f64);
    let mean_img = Image::new(
        8,
        8,
        (0..64).map(|j| imgs.iter().map(|i| i.pixels()[j]).sum::<f64>() / imgs.len() as f64).collect(),
    )
    .unwrap();
    for img in [&imgs[0], &mean_img] {
        let p = predict(&model, img).unwrap();
        for k in 0..3 {
            assert!((p[k] - means[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn training_error_grows_with_lambda() {
    let imgs = random_images(150, 8, 5);
    let mut rng = rng_from_seed(6);
    let t: Vec<[f64; 3]> = linear_targets(&imgs)
        .into_iter()
        .map(|r| r.map(|v| v + rng.gen::<f64>() - 0.5))
        .collect();
    let tr: Vec<&[f64]> = t.iter().map(|r| r.as_slice()).collect();
    let mut last = 0.0;
    for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1e4] {
        let m = LinearReadout::fit(&imgs, &tr, lambda, 2).unwrap();
        let e = m.training_mse(&imgs, &tr).unwrap();
        assert!(e >= last - 1e-12, "λ = {lambda}: {e} < {last}");
        last = e;
    }
}

#[test]
fn prediction_is_affine_in_features() {
    let imgs = random_images(120, 8, 7);
    let t = linear_targets(&imgs);
    let model = train(&imgs, &t, 1.0, 2, meta()).unwrap();
    let f1 = featurize(&imgs[0], &model.readout.features).unwrap();
    let f2 = featurize(&imgs[1], &model.readout.features).unwrap();
    let a = 0.3;
    let mix: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
    let p1 = model.readout.apply_features(&f1).unwrap();
    let p2 = model.readout.apply_features(&f2).unwrap();
    let pm = model.readout.apply_features(&mix).unwrap();
    for k in 0..3 {
        assert!((pm[k] - (a * p1[k] + (1.0 - a) * p2[k])).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let imgs = random_images(80, 8, 8);
    let t = linear_targets(&imgs);
    let meta = TrainingMeta { n_train: 80, seed: 9, sigma2: 18.0 };
    let a = train(&imgs, &t, 0.1, 2, meta.clone()).unwrap();
    let b = train(&imgs, &t, 0.1, 2, meta).unwrap();
    assert_eq!(a, b);
    let back = PredictorModel::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    a.save(&path).unwrap();
    assert_eq!(PredictorModel::load(&path).unwrap(), a);

    let bumped = a.to_json().unwrap().replace("\"version\": 1", "\"version\": 2");
    assert!(matches!(
        PredictorModel::from_json(&bumped),
        Err(synthlong::Error::UnsupportedVersion { found: 2, .. })
    ));
}

#[test]
fn lambda_selection_prefers_validation_minimum() {
    let imgs = random_images(300, 8, 10);
    let mut rng = rng_from_seed(11);
    let t: Vec<[f64; 3]> = linear_targets(&imgs)
        .into_iter()
        .map(|r| r.map(|v| v + 0.5 * (rng.gen::<f64>() - 0.5)))
        .collect();
    let (best, scores) = select_lambda(&imgs[..200], &t[..200], &imgs[200..], &t[200..], &[0.01, 0.1, 1.0, 10.0, 100.0], 1).unwrap();
    assert_eq!(scores.len(), 5);
    let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    assert_eq!(scores.iter().find(|s| s.1 == min).unwrap().0, best);
}
