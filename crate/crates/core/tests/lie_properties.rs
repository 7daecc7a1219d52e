use nalgebra::Vector3;
use proptest::prelude::*;
use sim3loop::liegroup::{sim3_left_jacobian, sim3_left_jacobian_inverse, Sim3Pose, Sim3Tangent};

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn tangent() -> impl Strategy<Value = Sim3Tangent> {
    (vec3(3.0), vec3(1.7), -1.0..1.0f64).prop_map(|(u, w, s)| Sim3Tangent::new(u, w, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn log_inverts_exp(xi in tangent()) {
        let back = Sim3Pose::exp(&xi).log().unwrap();
        prop_assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity(xi in tangent()) {
        let s = Sim3Pose::exp(&xi);
        let e = s.compose(&s.inverse()).log().unwrap();
        prop_assert!(e.to_vector().norm() < 1e-10);
    }

    #[test]
    fn action_is_a_homomorphism(a in tangent(), b in tangent(), x in vec3(5.0)) {
        let (a, b) = (Sim3Pose::exp(&a), Sim3Pose::exp(&b));
        let lhs = a.compose(&b).act(&x);
        let rhs = a.act(&b.act(&x));
        prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + rhs.norm()));
    }

    #[test]
    fn adjoint_moves_perturbations_across(xi in tangent(), d in tangent()) {
        // exp(Ad_T d) T == T exp(d)
        let t = Sim3Pose::exp(&xi);
        let d = Sim3Tangent::from_vector(&(d.to_vector() * 1e-2));
        let lhs = Sim3Pose::exp(&Sim3Tangent::from_vector(&(t.adjoint() * d.to_vector()))).compose(&t);
        let rhs = t.compose(&Sim3Pose::exp(&d));
        prop_assert!((lhs.to_matrix() - rhs.to_matrix()).norm() < 1e-9 * (1.0 + rhs.to_matrix().norm()));
    }

    #[test]
    fn left_jacobian_inverse_is_an_inverse(xi in tangent()) {
        let p = sim3_left_jacobian(&xi) * sim3_left_jacobian_inverse(&xi);
        prop_assert!((p - nalgebra::SMatrix::<f64, 7, 7>::identity()).norm() < 1e-8);
    }
}
