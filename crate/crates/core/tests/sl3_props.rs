use jointalign::sl3::{
    gauge_normalize, ic_warp, karcher_mean, sl3_exp, sl3_log, GaugeMode, Homography, Point2,
    Sl3Vector,
};
use nalgebra::Matrix3;
use proptest::prelude::*;

fn vector(bound: f64) -> impl Strategy<Value = Sl3Vector> {
    prop::array::uniform8(-1.0f64..1.0).prop_map(move |c| {
        let v = Sl3Vector(c);
        let n = v.norm();
        // Rescale to a radius drawn inside the ball.
        if n > 0.0 {
            v * (bound * c[0].abs() / n)
        } else {
            v
        }
    })
}

fn frob(m: &Matrix3<f64>) -> f64 {
    m.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn exp_has_unit_determinant(v in vector(5.0)) {
        let h = sl3_exp(&v).unwrap();
        prop_assert!((h.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exp_of_negation_is_inverse(v in vector(5.0)) {
        let h = sl3_exp(&v).unwrap();
        let g = sl3_exp(&-v).unwrap();
        let scale = 1.0 + frob(h.matrix()) * frob(g.matrix());
        prop_assert!(frob(&(g.matrix() * h.matrix() - Matrix3::identity())) < 1e-8 * scale);
    }

    #[test]
    fn log_inverts_exp_in_unit_ball(v in vector(1.0)) {
        let back = sl3_log(&sl3_exp(&v).unwrap()).unwrap();
        prop_assert!((back - v).norm() < 1e-8);
    }

    #[test]
    fn ic_warp_ignores_global_gauge(
        ti in vector(0.5), tj in vector(0.5), t0 in vector(0.5),
        x in -0.8f64..0.8, y in -0.8f64..0.8,
    ) {
        let p = Point2::new(x, y);
        let g = sl3_exp(&t0).unwrap();
        let hi = sl3_exp(&ti).unwrap().then(&g);
        let hj = sl3_exp(&tj).unwrap().then(&g);
        let direct = ic_warp(&ti, &tj, p).unwrap();
        let gauged = hi.then(&hj.inverse()).apply(p).unwrap();
        prop_assert!(direct.distance(&gauged) < 1e-9 * (1.0 + direct.x.abs() + direct.y.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn karcher_mean_is_right_equivariant(
        vs in prop::collection::vec(vector(0.5), 2..6),
        gv in vector(0.3),
    ) {
        let hs: Vec<Homography> = vs.iter().map(|v| sl3_exp(v).unwrap()).collect();
        let g = sl3_exp(&gv).unwrap();
        let moved: Vec<Homography> = hs
            .iter()
            .map(|h| Homography::normalized(h.matrix() * g.matrix()).unwrap())
            .collect();
        let a = karcher_mean(&hs).unwrap();
        let b = karcher_mean(&moved).unwrap();
        prop_assert!(a.converged && b.converged);
        let expected = a.mean.matrix() * g.matrix();
        prop_assert!(frob(&(b.mean.matrix() - expected)) < 1e-7);
    }

    #[test]
    fn gauge_modes_share_relative_warps(vs in prop::collection::vec(vector(0.8), 2..6)) {
        let by_mode: Vec<Vec<Homography>> = [GaugeMode::Karcher, GaugeMode::First, GaugeMode::None]
            .into_iter()
            .map(|m| gauge_normalize(&vs, m).unwrap().homographies)
            .collect();
        for hs in &by_mode {
            for h in hs {
                prop_assert!((h.determinant() - 1.0).abs() < 1e-9);
            }
        }
        for i in 0..vs.len() {
            for j in 0..vs.len() {
                let rel = |hs: &[Homography]| hs[j].inverse().matrix() * hs[i].matrix();
                let base = rel(&by_mode[2]);
                for hs in &by_mode[..2] {
                    prop_assert!(frob(&(rel(hs) - base)) < 1e-8 * (1.0 + frob(&base)));
                }
            }
        }
    }
}

#[test]
fn karcher_of_weighted_one_parameter_set() {
    let v = Sl3Vector([0.1, -0.05, 0.08, 0.02, -0.03, 0.04, 0.01, -0.02]);
    let e = sl3_exp(&v).unwrap();
    let hs = [e, e, e, Homography::identity()];
    let km = karcher_mean(&hs).unwrap();
    let expected = sl3_exp(&(v * 0.75)).unwrap();
    assert!(km.converged);
    assert!(frob(&(km.mean.matrix() - expected.matrix())) < 1e-6);

    // Dense iteration of the fixed-point map from the identity as oracle.
    let mut mu = Matrix3::identity();
    for _ in 0..200 {
        let inv = mu.try_inverse().unwrap();
        let mut step = Sl3Vector::zero();
        for h in &hs {
            let d = Homography::normalized(inv * h.matrix()).unwrap();
            step = step + sl3_log(&d).unwrap() * 0.25;
        }
        mu *= sl3_exp(&step).unwrap().matrix();
    }
    assert!(frob(&(km.mean.matrix() - mu)) < 1e-9);
}
