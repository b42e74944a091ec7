//! Cross-checks of the closed-form / Newton operators against independent
//! numerical oracles: golden-section scalar minimization, gradient descent on
//! the prox objective, central finite differences, and random-perturbation
//! optimality probes.

use pnp_core::fidelity::{
    poisson_prox_scalar, qis_prox_scalar, random_mask, random_qis_cases, Fidelity, Mask,
    MriFidelity, MriProblem, PoissonFidelity, QisFidelity, QisObservation, QuadraticFidelity,
};
use pnp_core::image::ImageTensor;
use pnp_core::oracle::{
    gradient_descent_prox, gradient_fd_error, perturbation_margin, poisson_prox_oracle,
    qis_prox_oracle, random_poisson_cases,
};
use pnp_core::rng::{standard_normal_image, uniform_image, RngSeed};
use pnp_core::ComplexImage;
use rand::Rng;

fn poisson_counts(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
    let mut rng = RngSeed(seed).rng();
    ImageTensor::from_fn(shape.0, shape.1, shape.2, |_, _, _| {
        rng.gen_range(0..6) as f64
    })
}

// The likelihood value is flat at zero-count pixels while the gradient and
// prox follow the linear branch there, so eval-based probes (finite
// differences, perturbation optimality) need strictly positive counts.
fn positive_counts(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
    let mut rng = RngSeed(seed).rng();
    ImageTensor::from_fn(shape.0, shape.1, shape.2, |_, _, _| {
        rng.gen_range(1..6) as f64
    })
}

fn qis_fidelity(shape: (usize, usize, usize), seed: u64) -> QisFidelity {
    let mut rng = RngSeed(seed).rng();
    let scale = shape.0 * shape.1 * shape.2;
    let x = ImageTensor::new(
        shape.0,
        shape.1,
        shape.2,
        (0..scale).map(|_| rng.gen_range(0.05..1.0)).collect(),
    )
    .unwrap();
    QisFidelity::new(QisObservation::simulate(&x, 8.0, 8, RngSeed(seed + 1)).unwrap())
}

fn mri_fidelity(seed: u64, rate: f64) -> MriFidelity {
    let x_true =
        ComplexImage::from_tensor(&standard_normal_image(2, 8, 8, &mut RngSeed(seed).rng()))
            .unwrap();
    let mask = if rate >= 1.0 {
        Mask::full(8, 8)
    } else {
        random_mask(8, 8, rate, RngSeed(seed + 1)).unwrap()
    };
    let problem = MriProblem::simulate(&x_true, mask, 15.0 / 255.0, RngSeed(seed + 2)).unwrap();
    MriFidelity::new(problem)
}

#[test]
fn poisson_prox_matches_golden_section_1000_cases() {
    let mut worst: f64 = 0.0;
    for (alpha, z, y) in random_poisson_cases(1000, RngSeed(11)) {
        let closed = poisson_prox_scalar(alpha, z, y);
        let oracle = poisson_prox_oracle(alpha, z, y);
        worst = worst.max((closed - oracle).abs());
    }
    assert!(worst <= 1e-8, "worst |closed - golden| = {worst}");
}

#[test]
fn qis_prox_matches_golden_section_100_cases() {
    let mut worst: f64 = 0.0;
    for (alpha, a, k0, k1, z) in random_qis_cases(100, RngSeed(12)) {
        let newton = qis_prox_scalar(alpha, a, k0, k1, z).unwrap();
        let oracle = qis_prox_oracle(alpha, a, k0, k1, z);
        worst = worst.max((newton - oracle).abs());
    }
    assert!(worst <= 1e-8, "worst |newton - golden| = {worst}");
}

#[test]
fn mri_prox_matches_gradient_descent_10_masks() {
    let mut worst: f64 = 0.0;
    for m in 0..10 {
        let f = mri_fidelity(100 + m, 0.3);
        let z = standard_normal_image(2, 8, 8, &mut RngSeed(200 + m).rng());
        for alpha in [0.5, 2.0] {
            let closed = f.prox(alpha, &z).unwrap();
            let iterative = gradient_descent_prox(&f, alpha, &z, 5000, 1e-12).unwrap();
            worst = worst.max(closed.sub(&iterative).norm2());
        }
    }
    assert!(worst <= 1e-6, "worst ||closed - gd|| = {worst}");
}

#[test]
fn quadratic_prox_matches_gradient_descent() {
    let b = standard_normal_image(1, 6, 6, &mut RngSeed(13).rng());
    let f = QuadraticFidelity::new(b);
    let z = standard_normal_image(1, 6, 6, &mut RngSeed(14).rng());
    for alpha in [0.1, 1.0, 10.0] {
        let closed = f.prox(alpha, &z).unwrap();
        let iterative = gradient_descent_prox(&f, alpha, &z, 5000, 1e-13).unwrap();
        assert!(closed.sub(&iterative).norm2() <= 1e-8);
    }
}

#[test]
fn prox_optimality_under_random_perturbations() {
    // the prox output must beat 10 000 random perturbations of itself
    let quad = QuadraticFidelity::new(standard_normal_image(1, 4, 4, &mut RngSeed(15).rng()));
    let poisson = PoissonFidelity::new(positive_counts((1, 4, 4), 16)).unwrap();
    let qis = qis_fidelity((1, 4, 4), 17);
    let models: Vec<(&str, &dyn Fidelity, usize)> = vec![
        ("quadratic", &quad, 1),
        ("poisson", &poisson, 1),
        ("qis", &qis, 1),
    ];
    for (name, f, _) in &models {
        let mut rng = RngSeed(18).rng();
        for alpha in [0.1, 1.0, 10.0] {
            let z = uniform_image(1, 4, 4, &mut rng).scale(2.0);
            let p = f.prox(alpha, &z).unwrap();
            let margin = perturbation_margin(*f, alpha, &z, &p, 10_000, RngSeed(19));
            assert!(
                margin >= -1e-9,
                "{name} prox beaten by a perturbation: margin {margin}"
            );
        }
    }
    // MRI operates on 2-channel complex views
    let mri = mri_fidelity(20, 0.3);
    let mut rng = RngSeed(21).rng();
    for alpha in [0.1, 1.0, 10.0] {
        let z = standard_normal_image(2, 8, 8, &mut rng);
        let p = mri.prox(alpha, &z).unwrap();
        let margin = perturbation_margin(&mri, alpha, &z, &p, 10_000, RngSeed(22));
        assert!(margin >= -1e-9, "mri prox margin {margin}");
    }
}

#[test]
fn prox_is_nonexpansive_all_models() {
    let quad = QuadraticFidelity::new(standard_normal_image(1, 4, 4, &mut RngSeed(23).rng()));
    let poisson = PoissonFidelity::new(poisson_counts((1, 4, 4), 24)).unwrap();
    let qis = qis_fidelity((1, 4, 4), 25);
    let models: Vec<(&str, &dyn Fidelity)> =
        vec![("quadratic", &quad), ("poisson", &poisson), ("qis", &qis)];
    let mut rng = RngSeed(26).rng();
    for (name, f) in &models {
        for alpha in [0.1, 1.0, 10.0] {
            for _ in 0..50 {
                let z1 = standard_normal_image(1, 4, 4, &mut rng).scale(1.5);
                let z2 = standard_normal_image(1, 4, 4, &mut rng).scale(1.5);
                let p1 = f.prox(alpha, &z1).unwrap();
                let p2 = f.prox(alpha, &z2).unwrap();
                let lhs = p1.sub(&p2).norm2();
                let rhs = z1.sub(&z2).norm2();
                assert!(
                    lhs <= rhs + 1e-10,
                    "{name} prox expanded a pair: {lhs} > {rhs}"
                );
            }
        }
    }
    let mri = mri_fidelity(27, 0.3);
    for alpha in [0.1, 1.0, 10.0] {
        for _ in 0..20 {
            let z1 = standard_normal_image(2, 8, 8, &mut rng);
            let z2 = standard_normal_image(2, 8, 8, &mut rng);
            let p1 = mri.prox(alpha, &z1).unwrap();
            let p2 = mri.prox(alpha, &z2).unwrap();
            assert!(p1.sub(&p2).norm2() <= z1.sub(&z2).norm2() + 1e-10);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    // interior points, central differences with step 1e-6
    let step = 1e-6;

    let quad = QuadraticFidelity::new(standard_normal_image(1, 4, 4, &mut RngSeed(30).rng()));
    let x = standard_normal_image(1, 4, 4, &mut RngSeed(31).rng());
    let err = gradient_fd_error(&quad, &x, step).unwrap();
    assert!(err <= 1e-5, "quadratic FD error {err}");

    let poisson = PoissonFidelity::new(positive_counts((1, 4, 4), 32)).unwrap();
    let mut rng = RngSeed(33).rng();
    let x = ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.gen_range(0.5..2.0));
    let err = gradient_fd_error(&poisson, &x, step).unwrap();
    assert!(err <= 1e-5, "poisson FD error {err}");

    let qis = qis_fidelity((1, 4, 4), 34);
    let x = ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.gen_range(0.3..1.5));
    let err = gradient_fd_error(&qis, &x, step).unwrap();
    assert!(err <= 1e-5, "qis FD error {err}");

    let mri = mri_fidelity(35, 0.3);
    let x = standard_normal_image(2, 8, 8, &mut RngSeed(36).rng());
    let err = gradient_fd_error(&mri, &x, step).unwrap();
    assert!(err <= 1e-5, "mri FD error {err}");
}

#[test]
fn poisson_prox_elementwise_matches_oracle_on_images() {
    let counts = poisson_counts((1, 4, 4), 37);
    let f = PoissonFidelity::new(counts.clone()).unwrap();
    let mut rng = RngSeed(38).rng();
    for alpha in [0.1, 1.0, 10.0] {
        let z = ImageTensor::from_fn(1, 4, 4, |_, _, _| rng.gen_range(-2.0..4.0));
        let p = f.prox(alpha, &z).unwrap();
        for i in 0..z.len() {
            let oracle = poisson_prox_oracle(alpha, z.as_slice()[i], counts.as_slice()[i]);
            assert!((p.as_slice()[i] - oracle).abs() <= 1e-8);
        }
    }
}

#[test]
fn mri_full_mask_is_strongly_convex_quadratic() {
    let f = mri_fidelity(39, 1.0);
    assert_eq!(f.mu(), Some(1.0));
    assert_eq!(f.lip_grad(), Some(1.0));
    // grad difference is an isometry image: ||grad(x) - grad(y)|| = ||x - y||
    let mut rng = RngSeed(40).rng();
    let x = standard_normal_image(2, 8, 8, &mut rng);
    let y = standard_normal_image(2, 8, 8, &mut rng);
    let gd = f.grad(&x).unwrap().sub(&f.grad(&y).unwrap()).norm2();
    let d = x.sub(&y).norm2();
    assert!((gd - d).abs() <= 1e-10 * d);
}
