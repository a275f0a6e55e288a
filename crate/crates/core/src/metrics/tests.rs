use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.gen::<f64>())
}

/// Grey image whose channel mean lands on exactly the given 8-bit levels.
fn from_levels(lv: &[u8], h: usize, w: usize) -> Tensor<f64> {
    let hw = h * w;
    Tensor::from_fn(&[3, h, w], |i| (lv[i % hw] as f64 + 0.5) / 255.0)
}

#[test]
fn identical_triple_identities() {
    let x = noise(1, 32, 24);
    let r = evaluate(&x, &x, &x).unwrap();
    assert_eq!(r.psnr, 100.0);
    assert!((r.cc - 1.0).abs() < 1e-12);
    assert!((r.nmi - 2.0).abs() < 1e-12);
    assert_eq!(r.q_ncie, 1.0);
    assert!((r.ssim - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_examples() {
    let f = Tensor::full(&[3, 4, 4], 0.5);
    let a = Tensor::full(&[3, 4, 4], 0.6);
    let b = Tensor::full(&[3, 4, 4], 0.4);
    let p = psnr(&f, &a, &b).unwrap();
    let expected = -10.0 * (0.1f64 * 0.1).log10();
    assert!((p.a - expected).abs() < 1e-9 && (p.b - expected).abs() < 1e-9);
    assert!((expected - 20.0).abs() < 1e-9);

    let b40 = Tensor::full(&[3, 4, 4], 0.51);
    let p = psnr(&f, &a, &b40).unwrap();
    assert!((0.5 * (p.a + p.b) - 30.0).abs() < 1e-6);
}

#[test]
fn cc_examples() {
    let a = noise(2, 16, 16);
    let inv = a.map(|v| 1.0 - v);
    let c = cc(&inv, &a, &a).unwrap();
    assert!((c.a + 1.0).abs() < 1e-12 && (c.b + 1.0).abs() < 1e-12);
    let flat = Tensor::full(&[3, 16, 16], 0.3);
    assert_eq!(cc(&flat, &a, &a).unwrap(), PerSource { a: 0.0, b: 0.0 });
}

#[test]
fn nmi_half_share_oracle() {
    // F uniform on 4 levels; A keeps F's high bit and draws its low bit
    // independently, so MI = 1 bit, H(F) = H(A) = 2 bits.
    let (mut f, mut a) = (Vec::new(), Vec::new());
    for _ in 0..32 {
        for lf in 0u8..4 {
            for bit in 0u8..2 {
                f.push(lf * 40);
                a.push((2 * (lf >> 1) + bit) * 40);
            }
        }
    }
    let (h, w) = (16, 16);
    let (ft, at) = (from_levels(&f, h, w), from_levels(&a, h, w));
    let (mi, hf, ha) = (1.0, 2.0, 2.0);
    let expected = 2.0 * mi / (hf + ha);
    let n = nmi(&ft, &at, &ft).unwrap();
    assert!((n.a - expected).abs() < 1e-12, "{}", n.a);
    assert!((n.a - 0.5).abs() < 1e-12);
    assert!((n.b - 1.0).abs() < 1e-12);
}

#[test]
fn nmi_vanishes_for_independent_noise() {
    let small = nmi(&noise(1, 128, 128), &noise(2, 128, 128), &noise(3, 128, 128)).unwrap();
    let big = nmi(&noise(1, 512, 512), &noise(2, 512, 512), &noise(3, 512, 512)).unwrap();
    assert!(big.a + big.b < small.a + small.b);
    assert!(big.a + big.b < 0.06, "{big:?}");
}

#[test]
fn q_ncie_independent_noise_near_closed_form() {
    let expected = 1.0 - 3f64.ln() / 256f64.ln();
    assert!((expected - 0.8019).abs() < 1e-4);
    let q = q_ncie(&noise(1, 256, 256), &noise(2, 256, 256), &noise(3, 256, 256)).unwrap();
    assert!((q - expected).abs() < 1e-2, "{q}");
    assert!(q > 0.0 && q <= 1.0);
}

/// Direct 2-D window SSIM without separable filtering.
fn ssim_brute(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let r = 5isize;
    let mut k = vec![0.0; 121];
    for dy in -r..=r {
        for dx in -r..=r {
            k[((dy + r) * 11 + dx + r) as usize] = (-((dx * dx + dy * dy) as f64) / 4.5).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (p, q, wt) = (x[(y0 + i) * w + x0 + j], y[(y0 + i) * w + x0 + j], k[i * 11 + j]);
                    mx += wt * p;
                    my += wt * q;
                }
            }
            for i in 0..11 {
                for j in 0..11 {
                    let (p, q, wt) = (x[(y0 + i) * w + x0 + j], y[(y0 + i) * w + x0 + j], k[i * 11 + j]);
                    vx += wt * (p - mx) * (p - mx);
                    vy += wt * (q - my) * (q - my);
                    cxy += wt * (p - mx) * (q - my);
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    acc / count
}

#[test]
fn rank_bins_uniform_marginals() {
    let lv: Vec<u8> = (0..512).map(|i| (i % 7) as u8).collect();
    let bins = rank_bins(&lv);
    let mut counts = [0usize; 256];
    bins.iter().for_each(|&b| counts[b as usize] += 1);
    assert!(counts.iter().all(|&c| c == 2));
    for i in 0..512 {
        for j in 0..512 {
            if lv[i] < lv[j] {
                assert!(bins[i] <= bins[j]);
            }
        }
    }
}

#[test]
fn ssim_matches_brute_force() {
    let (h, w) = (16, 14);
    let (x, _, _) = gray(&noise(4, h, w)).unwrap();
    let (y, _, _) = gray(&noise(5, h, w)).unwrap();
    let fast = ssim_gray(&x, &y, h, w).unwrap();
    assert!((fast - ssim_brute(&x, &y, h, w)).abs() < 1e-10);
}

#[test]
fn ssim_examples() {
    let (a, b) = (noise(6, 20, 20), noise(7, 20, 20));
    let ab = ssim(&a, &b, &b).unwrap().a;
    let ba = ssim(&b, &a, &a).unwrap().a;
    assert!((ab - ba).abs() < 1e-12);
    let grey = Tensor::full(&[3, 20, 20], 0.5);
    let s = ssim(&a, &grey, &grey).unwrap();
    let (ga, _, _) = gray(&a).unwrap();
    let reference = ssim_brute(&ga, &vec![0.5; 400], 20, 20);
    assert!((s.a - reference).abs() < 1e-10);
    assert!(s.a < 1.0);
    assert!(ssim(&noise(1, 10, 30), &noise(1, 10, 30), &noise(1, 10, 30)).is_err());
}

#[test]
fn shape_mismatch_rejected() {
    let (a, b) = (noise(1, 12, 12), noise(1, 12, 13));
    assert!(psnr(&a, &a, &b).is_err());
    assert!(cc(&a, &b, &a).is_err());
    assert!(nmi(&a, &a, &b).is_err());
    assert!(q_ncie(&b, &a, &a).is_err());
    assert!(ssim(&a, &a, &b).is_err());
}

#[test]
fn source_order_invariance() {
    let (f, a, b) = (noise(1, 24, 24), noise(2, 24, 24), noise(3, 24, 24));
    let (x, y) = (evaluate(&f, &a, &b).unwrap(), evaluate(&f, &b, &a).unwrap());
    for (p, q) in [(x.nmi, y.nmi), (x.q_ncie, y.q_ncie), (x.ssim, y.ssim), (x.psnr, y.psnr), (x.cc, y.cc)] {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn report_mean_and_csv() {
    let x = noise(1, 16, 16);
    let r = evaluate(&x, &noise(2, 16, 16), &noise(3, 16, 16)).unwrap();
    let m = MetricReport::mean(&[r, r]);
    assert!((m.q_ncie - r.q_ncie).abs() < 1e-15);
    assert_eq!(r.csv_fields().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn histogram_metrics_invariant_under_relabeling(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let lv = |rng: &mut ChaCha8Rng| (0..h * w).map(|_| rng.gen_range(0u8..12)).collect::<Vec<u8>>();
        let (f, a, b) = (lv(&mut rng), lv(&mut rng), lv(&mut rng));
        let mut perm: Vec<u8> = (0..=255).collect();
        for i in (1..256).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabel = |x: &[u8]| x.iter().map(|&v| perm[v as usize]).collect::<Vec<u8>>();
        let t = |x: &[u8]| from_levels(x, h, w);
        let before = nmi(&t(&f), &t(&a), &t(&b)).unwrap();
        let after = nmi(&t(&relabel(&f)), &t(&relabel(&a)), &t(&relabel(&b))).unwrap();
        prop_assert!((before.a - after.a).abs() < 1e-12);
        prop_assert!((before.b - after.b).abs() < 1e-12);

        // strictly increasing relabeling keeps the rank grid
        let mut mono: Vec<u8> = perm[..12].to_vec();
        mono.sort();
        mono.dedup();
        prop_assume!(mono.len() == 12);
        let up = |x: &[u8]| x.iter().map(|&v| mono[v as usize]).collect::<Vec<u8>>();
        let q0 = q_ncie(&t(&f), &t(&a), &t(&b)).unwrap();
        let q1 = q_ncie(&t(&up(&f)), &t(&up(&a)), &t(&up(&b))).unwrap();
        prop_assert!((q0 - q1).abs() < 1e-12);
    }

    #[test]
    fn ranges_hold(seed in 0u64..1000) {
        let (f, a, b) = (noise(seed, 16, 16), noise(seed + 1, 16, 16), noise(seed + 2, 16, 16));
        let r = evaluate(&f, &a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.cc));
        prop_assert!((-1.0..=1.0).contains(&r.ssim));
        prop_assert!(r.nmi >= 0.0);
        prop_assert!(r.q_ncie > 0.0 && r.q_ncie <= 1.0 + 1e-12);
    }
}
