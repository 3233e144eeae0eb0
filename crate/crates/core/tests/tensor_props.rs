use proptest::prelude::*;
use rifle_core::tensor::{frobenius_norm, gaussian_init, matmul, matmul_serial};
use rifle_core::{Rng, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    gaussian_init(shape, 0.0, 1.0, &mut Rng::new(seed)).unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-300)
}

proptest! {
    #[test]
    fn matmul_is_associative(m in 1usize..7, k in 1usize..7, l in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let a = random(&[m, k], seed);
        let b = random(&[k, l], seed ^ 1);
        let c = random(&[l, n], seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(rel_err(&left, &right) < 1e-9);
    }

    #[test]
    fn frobenius_is_absolutely_homogeneous(rows in 1usize..8, cols in 1usize..8, c in -1e3f64..1e3, seed in any::<u64>()) {
        let t = random(&[rows, cols], seed);
        let lhs = frobenius_norm(&t.scale(c));
        let rhs = c.abs() * frobenius_norm(&t);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn gaussian_init_is_reproducible(rows in 1usize..10, cols in 1usize..10, mean in -5f64..5.0, std in 0f64..3.0, seed in any::<u64>()) {
        let a = gaussian_init(&[rows, cols], mean, std, &mut Rng::new(seed)).unwrap();
        let b = gaussian_init(&[rows, cols], mean, std, &mut Rng::new(seed)).unwrap();
        prop_assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn transpose_is_an_involution(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let t = random(&[rows, cols], seed);
        prop_assert!(t.transpose().unwrap().transpose().unwrap().bitwise_eq(&t));
    }

    #[test]
    fn matmul_matches_serial_kernel(m in 1usize..40, k in 1usize..40, n in 1usize..40, seed in any::<u64>()) {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed ^ 7);
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_serial(a.data(), b.data(), m, k, n);
        prop_assert_eq!(fast.data(), &slow[..]);
    }
}

#[test]
fn large_product_is_bitwise_identical_to_serial() {
    // Big enough to cross the parallel threshold.
    let a = random(&[96, 80], 1);
    let b = random(&[80, 72], 2);
    let fast = matmul(&a, &b).unwrap();
    let slow = matmul_serial(a.data(), b.data(), 96, 80, 72);
    assert_eq!(fast.data(), &slow[..]);
}
