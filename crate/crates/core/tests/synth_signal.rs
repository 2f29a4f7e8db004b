//! The generator hides spider-mite damage from RGB and shows it in NIR.

use rgbn_core::data::Condition;
use rgbn_core::synth::{crop_bench_spec, generate_scene, instance_means, separability_probe_means, SceneSpec};

fn collect(spec: &SceneSpec, per_class: usize, seed: u64) -> Vec<(Condition, [f64; 4])> {
    let mut means = Vec::new();
    let mut s = seed;
    let count = |m: &[(Condition, [f64; 4])], c| m.iter().filter(|x| x.0 == c).count();
    while count(&means, Condition::Healthy) < per_class || count(&means, Condition::Spidermite) < per_class {
        let scene = generate_scene(spec, s).unwrap();
        means.extend(instance_means(&scene.image, &scene.annotations).unwrap());
        s += 1;
    }
    means
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn default_spec_separates_in_nir_only() {
    let means = collect(&SceneSpec::default(), 150, 100);
    let r = separability_probe_means(&means).unwrap();
    assert!(r.nir_accuracy >= 0.95, "{r:?}");
    assert!(r.best_rgb() <= 0.65, "{r:?}");
}

#[test]
fn equal_nir_means_remove_the_signal() {
    let spec = SceneSpec {
        nir_means: [0.7, 0.7, 0.7],
        ..SceneSpec::default()
    };
    let r = separability_probe_means(&collect(&spec, 150, 100)).unwrap();
    assert!(r.nir_accuracy <= 0.65, "{r:?}");
}

#[test]
fn rgb_plane_distributions_match_between_healthy_and_spidermite() {
    let means = collect(&crop_bench_spec(), 1000, 7);
    let pick = |c: Condition, p: usize| means.iter().filter(|m| m.0 == c).map(|m| m.1[p]).collect::<Vec<_>>();
    for p in 0..3 {
        let d = ks(pick(Condition::Healthy, p), pick(Condition::Spidermite, p));
        eprintln!("plane {p}: KS {d:.4}");
        assert!(d < 0.05, "plane {p}: KS {d}");
    }
    let nir = ks(pick(Condition::Healthy, 3), pick(Condition::Spidermite, 3));
    assert!(nir > 0.9, "NIR KS {nir}");
}
