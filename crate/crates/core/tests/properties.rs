use mattekit::dgm::{self, response, DgmConfig, Normalize};
use mattekit::losses::{self, CompositionTargets, LossConfig, LossInputs, LossKind, Region};
use mattekit::trimap::{from_alpha_distance, from_alpha_morphology, TrimapLabel};
use mattekit::{composite, AlphaMatte, Image};
use mattekit_autograd::{Tape, Tensor};
use proptest::prelude::*;

/// Alpha values mixing exact 0, exact 1 and fractional entries.
fn alpha_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], n)
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

/// A blob-like matte: opaque centre, transparent border, random soft band.
fn blob(size: usize, radius: f64, band: f64) -> AlphaMatte {
    let c = (size as f64 - 1.0) / 2.0;
    AlphaMatte::from_fn(size, size, |x, y| {
        let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        (radius + band - r) / (2.0 * band) + 0.5
    })
    .unwrap()
}

fn check_trimap(alpha: &AlphaMatte, t: &mattekit::Trimap) -> Result<(), TestCaseError> {
    for (&a, &l) in alpha.values().iter().zip(t.labels()) {
        if a > 0.0 && a < 1.0 {
            prop_assert_eq!(l, TrimapLabel::Unknown);
        }
        match l {
            TrimapLabel::Foreground => prop_assert!(a >= 1.0 - 1e-6),
            TrimapLabel::Background => prop_assert!(a <= 1e-6),
            TrimapLabel::Unknown => {}
        }
    }
    Ok(())
}

/// Gradient of a single-image loss with respect to the prediction.
fn loss_gradient(pred: &[f64], alpha_g: &[f64], resp: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len();
    let mut g = Tape::new();
    let p = g.leaf(Tensor::new(vec![1, 1, 1, n], pred.to_vec()).unwrap());
    let mask = vec![true; n];
    let l = losses::weighted_alpha_loss(&mut g, p, alpha_g, resp, &mask).unwrap();
    let value = g.value(l).data()[0];
    g.backward(l).unwrap();
    (value, g.grad(p).unwrap().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn compositing_recovers_the_layers_at_binary_alpha(
        fg in unit_values(3 * 36), bg in unit_values(3 * 36), a in alpha_values(36)
    ) {
        let fg = Image::new(6, 6, fg).unwrap();
        let bg = Image::new(6, 6, bg).unwrap();
        let alpha = AlphaMatte::new(6, 6, a).unwrap();
        let out = composite(&fg, &bg, &alpha).unwrap();
        for i in 0..36 {
            let (x, y) = (i % 6, i / 6);
            let px = out.get(x, y);
            prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            match alpha.get(x, y) {
                a if a == 1.0 => prop_assert_eq!(px, fg.get(x, y)),
                a if a == 0.0 => prop_assert_eq!(px, bg.get(x, y)),
                _ => {}
            }
        }
    }

    #[test]
    fn trimaps_are_sound_consistent_and_repeatable(
        a in alpha_values(20 * 20),
        kernel in (1usize..6).prop_map(|k| 2 * k + 1),
        radius in 0.5f64..6.0,
    ) {
        let alpha = AlphaMatte::new(20, 20, a).unwrap();
        let m = from_alpha_morphology(&alpha, kernel).unwrap();
        check_trimap(&alpha, &m)?;
        prop_assert_eq!(&m, &from_alpha_morphology(&alpha, kernel).unwrap());
        let d = from_alpha_distance(&alpha, radius).unwrap();
        check_trimap(&alpha, &d)?;
        prop_assert_eq!(&d, &from_alpha_distance(&alpha, radius).unwrap());
    }

    #[test]
    fn trimaps_of_blobs_are_sound(radius in 3.0f64..10.0, band in 0.3f64..4.0, kernel in (1usize..8).prop_map(|k| 2 * k + 1)) {
        let alpha = blob(24, radius, band);
        check_trimap(&alpha, &from_alpha_morphology(&alpha, kernel).unwrap())?;
        check_trimap(&alpha, &from_alpha_distance(&alpha, band + 0.5).unwrap())?;
    }

    #[test]
    fn response_peaks_at_the_centre_and_falls_off(
        sigma2 in 0.05f64..1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0,
    ) {
        let (near, far) = if (a - 0.5).abs() <= (b - 0.5).abs() { (a, b) } else { (b, a) };
        prop_assume!((far - 0.5).abs() - (near - 0.5).abs() > 1e-6);
        for mode in [Normalize::RawPdf, Normalize::PeakOne] {
            let r = |x| response(x, 0.5, sigma2, mode);
            prop_assert!(r(0.5) >= r(near));
            prop_assert!(r(near) > r(far));
        }
    }

    #[test]
    fn variance_schedule_is_a_capped_staircase(
        init in 0.05f64..0.5, step in 0.001f64..0.05, interval in 1u64..100, cap_extra in 0.0f64..0.5,
    ) {
        let config = DgmConfig {
            sigma2_init: init,
            sigma2_step: step,
            step_interval: interval,
            sigma2_cap: init + cap_extra,
            ..DgmConfig::default()
        };
        let mut prev = config.sigma2_at(0);
        prop_assert_eq!(prev, init);
        for it in 1..40 * interval {
            let s = config.sigma2_at(it);
            prop_assert!(s >= prev && s <= config.sigma2_cap);
            if it % interval == 0 {
                let k = (it / interval) as f64;
                if init + step * k <= config.sigma2_cap {
                    prop_assert!((s - prev - step).abs() < 1e-12);
                }
            } else {
                prop_assert_eq!(s, prev);
            }
            prev = s;
        }
    }

    #[test]
    fn normalization_mode_only_rescales_the_gradient(
        pred in unit_values(12), truth in alpha_values(12), sigma2 in 0.1f64..0.75,
    ) {
        let resp = |mode| truth.iter().map(|&a| response(a, 0.5, sigma2, mode)).collect::<Vec<_>>();
        let (_, raw) = loss_gradient(&pred, &truth, &resp(Normalize::RawPdf));
        let (_, peak) = loss_gradient(&pred, &truth, &resp(Normalize::PeakOne));
        let c = 1.0 / (2.0 * std::f64::consts::PI * sigma2).sqrt();
        for (r, p) in raw.iter().zip(&peak) {
            prop_assert!((r - c * p).abs() <= 1e-12 * r.abs().max(1e-12));
        }
    }

    #[test]
    fn losses_are_non_negative_and_vanish_at_the_truth(
        pred in unit_values(2 * 16), truth in alpha_values(2 * 16),
        fg in unit_values(2 * 3 * 16), bg in unit_values(2 * 3 * 16),
        unknown in prop::collection::vec(any::<bool>(), 2 * 16),
        kind_index in 0usize..5, full_image in any::<bool>(),
    ) {
        let kind = [
            LossKind::GaussianL1Dynamic,
            LossKind::GaussianL1Static,
            LossKind::CompPlusAlpha,
            LossKind::L1L2Hybrid,
            LossKind::PlainL1,
        ][kind_index];
        let config = LossConfig {
            kind,
            region: if full_image { Region::FullImage } else { Region::UnknownOnly },
            ..LossConfig::default()
        };
        // Composite built from the truth with the planar N×3×H×W layout.
        let comp: Vec<f64> = (0..2 * 3 * 16)
            .map(|i| {
                let a = truth[(i / 48) * 16 + i % 16];
                a * fg[i] + (1.0 - a) * bg[i]
            })
            .collect();
        let inputs = LossInputs {
            alpha_g: &truth,
            unknown: &unknown,
            colour: CompositionTargets { fg: &fg, bg: &bg, composite: &comp },
        };
        let eval = |p: &[f64]| {
            let mut g = Tape::new();
            let v = g.constant(Tensor::new(vec![2, 1, 4, 4], p.to_vec()).unwrap());
            let l = losses::compute_loss(&mut g, &config, &DgmConfig::default(), 120, v, &inputs).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!(eval(&pred) >= 0.0);
        let at_truth = eval(&truth);
        if kind == LossKind::CompPlusAlpha {
            // Raw Charbonnier: each of the two mean terms is at least ε.
            prop_assert!(at_truth <= 2.0 * config.epsilon_comp + 1e-12);
        } else {
            prop_assert_eq!(at_truth, 0.0);
        }
    }
}

#[test]
fn transition_pixels_get_the_centre_to_tail_gradient_ratio() {
    // Equal residual magnitude on an α=0.5 pixel and on an α=0 pixel.
    let truth = [0.5, 0.0];
    let pred = [0.8, 0.3];
    let resp: Vec<f64> = truth
        .iter()
        .map(|&a| response(a, 0.5, 0.25, Normalize::RawPdf))
        .collect();
    let (_, grad) = loss_gradient(&pred, &truth, &resp);
    let ratio = grad[0] / grad[1];
    assert!((ratio - 0.5f64.exp()).abs() < 1e-12, "{ratio}");
}

#[test]
fn rising_variance_flattens_the_centre_to_edge_weighting() {
    let config = DgmConfig::default();
    let mut last = f64::INFINITY;
    let mut seen = 0;
    for it in (0..).step_by(config.step_interval as usize) {
        let s2 = config.sigma2_at(it);
        let ratio =
            response(0.5, 0.5, s2, Normalize::RawPdf) / response(0.0, 0.5, s2, Normalize::RawPdf);
        if s2 == config.sigma2_cap {
            assert!(ratio <= last);
            break;
        }
        assert!(ratio < last, "iteration {it}: {ratio} vs {last}");
        last = ratio;
        seen += 1;
    }
    assert!(seen > 10);
}

#[test]
fn response_map_applies_the_pointwise_response() {
    let alpha = blob(9, 2.0, 1.5);
    let map = dgm::response_map(&alpha, 0.5, 0.3, Normalize::PeakOne).unwrap();
    for (&a, &r) in alpha.values().iter().zip(map.values()) {
        assert_eq!(r, response(a, 0.5, 0.3, Normalize::PeakOne));
    }
    assert!(dgm::response_map(&alpha, 0.5, 0.0, Normalize::RawPdf).is_err());
}
