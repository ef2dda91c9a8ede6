use aggflex::clustering::{kmeans_rhs, Clustering};
use aggflex::containment::{check_ah_in_h, verify_certificate, ContainmentCertificate};
use aggflex::experiments::{check_disaggregation, peak_shave_exact, quantile, suboptimality_gap};
use aggflex::flexibility::{build_flexibility_set, derive_seed, unmanaged_profile, EvSpec};
use aggflex::io::ScenarioFile;
use aggflex::multibattery::{solve_approximation, Variant};
use aggflex::polytope::sample::{random_direction, sample_points};
use aggflex::polytope::{
    aggregate_outer_bound, enumerate_vertices, minkowski_sum_vertices, ChargingGrid, HPolytope, Representation,
};
use aggflex::solver::{Backend, Norm, SolverConfig, SolverGateway};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex() -> SolverGateway {
    SolverGateway::new(SolverConfig { backend: Backend::Simplex, ..Default::default() }).unwrap()
}

/// `(T, spec)` with `E` a fraction of the deliverable energy.
fn ev(t_max: usize) -> impl Strategy<Value = (usize, EvSpec)> {
    (2..=t_max).prop_flat_map(|t| {
        (Just(t), 0..t, 0..t, 0.5f64..11.0, 0.0f64..=1.0).prop_map(|(t, a, b, r, f)| {
            let (a, d) = (a.min(b), a.max(b));
            (t, EvSpec::new(a, d, r, f * r * (d - a) as f64))
        })
    })
}

fn fleet(t: usize, n: usize) -> impl Strategy<Value = Vec<EvSpec>> {
    prop::collection::vec((0..t, 0..t, 0.5f64..11.0, 0.0f64..=1.0), n).prop_map(|v| {
        v.into_iter()
            .map(|(a, b, r, f)| {
                let (a, d) = (a.min(b), a.max(b));
                EvSpec::new(a, d, r, f * r * (d - a) as f64)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_matrix_times_cumulative_is_power_matrix(t in 1usize..12, delta in 0.1f64..3.0) {
        let g = ChargingGrid::new(t, delta, Representation::Energy).unwrap();
        let back = g.energy_matrix() * g.cumulative();
        prop_assert!((back - g.power_matrix()).amax() <= 1e-12);
    }

    #[test]
    fn representations_agree_on_membership((t, spec) in ev(8), seed in any::<u64>()) {
        let gw = simplex();
        let g = ChargingGrid::new(t, 1.0, Representation::Energy).unwrap();
        let f = build_flexibility_set(&spec, &g, &gw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for u in sample_points(&f.power, 10, &mut rng, &gw).unwrap() {
            prop_assert!(f.polytope.max_violation(&g.to_internal(&u)).unwrap() <= 1e-9);
            prop_assert!((g.to_power(&g.to_internal(&u)) - &u).amax() <= 1e-9);
        }
    }

    #[test]
    fn unmanaged_profile_is_member_and_energy_is_conserved((t, spec) in ev(10), seed in any::<u64>()) {
        let gw = simplex();
        let g = ChargingGrid::new(t, 1.0, Representation::Power).unwrap();
        let f = build_flexibility_set(&spec, &g, &gw).unwrap();
        let u = unmanaged_profile(&spec, &g).unwrap();
        prop_assert!(f.contains_profile(&u, 1e-9).unwrap());
        let (lo, hi) = (f.lower_energy(), f.upper_energy());
        for k in 0..t {
            prop_assert!(lo[k] <= hi[k] + 1e-12);
            if k > 0 {
                prop_assert!(lo[k] >= lo[k - 1] && hi[k] >= hi[k - 1]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in sample_points(&f.power, 5, &mut rng, &gw).unwrap() {
            prop_assert!((p.sum() - spec.energy).abs() <= 1e-7 * (1.0 + spec.energy));
        }
    }

    #[test]
    fn identity_certificate_survives_common_scaling(lo in -3.0f64..0.0, w in 0.1f64..3.0, extra in 0.0f64..2.0, c in 0.1f64..10.0) {
        let gw = simplex();
        let x = HPolytope::from_box(&[lo, lo], &[lo + w, lo + w]).unwrap();
        let y = HPolytope::from_box(&[lo - extra, lo - extra], &[lo + w + extra, lo + w + extra]).unwrap();
        let out = check_ah_in_h(&DVector::zeros(2), &DMatrix::identity(2, 2), &x, &y, &gw).unwrap();
        let cert = out.certificate().expect("box inside a larger box").clone();
        prop_assert!(verify_certificate(&cert, &x, &y, 1e-9).unwrap());
        let scaled = ContainmentCertificate { gamma: &cert.gamma * c, ..cert.clone() };
        let (xs, ys) = (x.with_rhs(x.b() * c).unwrap(), y.with_rhs(y.b() * c).unwrap());
        prop_assert!(verify_certificate(&scaled, &xs, &ys, 1e-9).unwrap());
    }

    #[test]
    fn certificate_maps_samples_into_target(g in prop::collection::vec(-1.5f64..1.5, 4), s in prop::collection::vec(-1.0f64..1.0, 2), seed in any::<u64>()) {
        let gw = simplex();
        let x = HPolytope::from_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let y = HPolytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        let gm = DMatrix::from_row_slice(2, 2, &g);
        let shift = DVector::from_vec(s);
        if let Some(cert) = check_ah_in_h(&shift, &gm, &x, &y, &gw).unwrap().certificate() {
            prop_assert!(verify_certificate(cert, &x, &y, 1e-9).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in sample_points(&x, 50, &mut rng, &gw).unwrap() {
                prop_assert!(y.is_member(&(&shift + &gm * p), 1e-7).unwrap());
            }
        } else {
            let vx = enumerate_vertices(&x, &gw).unwrap();
            prop_assert!(vx.vertices.iter().any(|v| !y.is_member(&(&shift + &gm * v), 1e-7).unwrap()));
        }
    }

    #[test]
    fn vertex_support_matches_lp(lo in prop::collection::vec(-2.0f64..0.0, 3), w in prop::collection::vec(0.1f64..2.0, 3), cut in 0.5f64..4.0, seed in any::<u64>()) {
        let gw = simplex();
        let hi: Vec<f64> = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
        let b = HPolytope::from_box(&lo, &hi).unwrap();
        let mut a = b.a().clone().insert_row(6, 1.0);
        a.row_mut(6).copy_from_slice(&[1.0, 1.0, 1.0]);
        let rhs = b.b().clone().insert_row(6, hi.iter().sum::<f64>() - cut.min(w.iter().sum::<f64>() * 0.9));
        let p = HPolytope::new(a, rhs).unwrap();
        let v = enumerate_vertices(&p, &gw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for vert in &v.vertices {
            prop_assert!(p.is_member(vert, 1e-9).unwrap());
        }
        for _ in 0..20 {
            let d = random_direction(3, &mut rng);
            prop_assert!((p.support_function(&d, &gw).unwrap() - v.support_function(&d)).abs() <= 1e-9);
        }
    }

    #[test]
    fn minkowski_sum_commutes_and_outer_bound_contains_it(x in prop::collection::vec(0.1f64..2.0, 6)) {
        let gw = simplex();
        let boxes: Vec<HPolytope> = (0..3).map(|j| HPolytope::from_box(&[0.0, -x[2 * j]], &[x[2 * j + 1], 0.5]).unwrap()).collect();
        let v: Vec<_> = boxes.iter().map(|b| enumerate_vertices(b, &gw).unwrap()).collect();
        let abc = minkowski_sum_vertices(&[v[0].clone(), v[1].clone(), v[2].clone()], &gw).unwrap();
        let cba = minkowski_sum_vertices(&[v[2].clone(), v[1].clone(), v[0].clone()], &gw).unwrap();
        let ab_c = minkowski_sum_vertices(&[minkowski_sum_vertices(&[v[0].clone(), v[1].clone()], &gw).unwrap(), v[2].clone()], &gw).unwrap();
        prop_assert!(abc.same_points(&cba, 1e-9));
        prop_assert!(abc.same_points(&ab_c, 1e-9));
        let outer = aggregate_outer_bound(&boxes.iter().collect::<Vec<_>>()).unwrap();
        for p in &abc.vertices {
            prop_assert!(outer.is_member(p, 1e-9).unwrap());
        }
    }

    #[test]
    fn kmeans_centroids_are_cluster_means(pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3..10), k in 1usize..4, seed in any::<u64>()) {
        let pts: Vec<DVector<f64>> = pts.into_iter().map(DVector::from_vec).collect();
        let k = k.min(pts.len());
        let c = kmeans_rhs(&pts, k, seed, 100, 3).unwrap();
        let single = Clustering::single(&pts).unwrap();
        prop_assert!(c.loss <= single.loss + 1e-9);
        prop_assert!(c.loss_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for j in 0..k {
            let members = c.members(j);
            prop_assert!(!members.is_empty());
            let mean = members.iter().fold(DVector::zeros(4), |s, &i| s + &pts[i]) / members.len() as f64;
            prop_assert!((&mean - &c.centroids[j]).amax() <= 1e-12);
        }
    }

    #[test]
    fn scenario_files_round_trip_exactly(specs in fleet(6, 5), delta in 0.25f64..2.0, seed in any::<u64>()) {
        let f = ScenarioFile::new(&specs, 6, delta, Some(seed));
        let back = ScenarioFile::from_json(&f.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn gap_and_quantiles(j_star in 0.01f64..100.0, extra in 0.0f64..50.0, mut xs in prop::collection::vec(-10.0f64..10.0, 1..30), q in 0.0f64..=1.0) {
        prop_assert!(suboptimality_gap(j_star + extra, j_star).unwrap() >= 0.0);
        xs.sort_by(f64::total_cmp);
        let v = quantile(&xs, q);
        prop_assert!(v >= xs[0] && v <= xs[xs.len() - 1]);
        prop_assert!(quantile(&xs, q) <= quantile(&xs, (q + 0.1).min(1.0)) + 1e-12);
    }

    #[test]
    fn derived_seeds_are_stable(master in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(derive_seed(master, a), derive_seed(master, a));
        if a != b {
            prop_assert_ne!(derive_seed(master, a), derive_seed(master, b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pipeline_is_sound_on_random_fleets(specs in fleet(4, 4), k in 1usize..=2, linf in any::<bool>(), power in any::<bool>(), seed in any::<u64>()) {
        let gw = SolverGateway::default();
        let rep = if power { Representation::Power } else { Representation::Energy };
        let norm = if linf { Norm::Linf } else { Norm::L2 };
        let g = ChargingGrid::new(4, 1.0, rep).unwrap();
        let sets: Vec<_> = specs.iter().map(|s| build_flexibility_set(s, &g, &gw).unwrap()).collect();
        let h: Vec<DVector<f64>> = sets.iter().map(|s| s.h.clone()).collect();
        let c = kmeans_rhs(&h, k, seed, 100, 3).unwrap();
        let joint = solve_approximation(&h, &c, &g, norm, Variant::Joint, &gw).unwrap();
        let split = solve_approximation(&h, &c, &g, norm, Variant::ClusterWise, &gw).unwrap();
        prop_assert!(joint.audit.within(1e-6));
        prop_assert!(split.surrogate_objective >= joint.surrogate_objective - 1e-6);
        let power_sets: Vec<HPolytope> = sets.iter().map(|s| s.power.clone()).collect();
        let check = check_disaggregation(&joint.model, &joint.map, &power_sets, 20, seed, 1e-7, &gw).unwrap();
        prop_assert!(check.all_passed(), "{:?}", check);
        let exact = peak_shave_exact(&sets, &gw).unwrap();
        let sum = exact.profiles.iter().fold(DVector::zeros(4), |s, p| s + p);
        prop_assert!((sum - &exact.aggregate).amax() <= 1e-8);
        for (p, s) in exact.profiles.iter().zip(&sets) {
            prop_assert!(s.contains_profile(p, 1e-7).unwrap());
        }
    }
}
