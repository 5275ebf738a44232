//! Property tests for the invariants that the ensemble machinery and the splice rely on.

use num_complex::Complex64;
use proptest::prelude::*;
use wavelab::config::ExperimentConfig;
use wavelab::diagnostics::{make_partition_with, SlabKind};
use wavelab::fields::{cutoff_minus, cutoff_plus, sample_spectrum, splice_weights, CutoffProfile, RngStream, SpectralDensity};
use wavelab::io::{read_fields, write_fields};
use wavelab::stats::{EnsembleStats, ExactSum};
use wavelab::{Lattice, Transform};

fn exact_sum(xs: &[f64]) -> f64 {
    let mut s = ExactSum::new();
    xs.iter().for_each(|&x| s.add(x));
    s.value()
}

fn wide_float() -> impl Strategy<Value = f64> {
    (-1.0f64..1.0, -60i32..60).prop_map(|(m, e)| m * 2f64.powi(e))
}

fn profile() -> impl Strategy<Value = CutoffProfile> {
    prop_oneof![Just(CutoffProfile::Smoothstep), Just(CutoffProfile::PowerPreserving)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_sum_is_order_and_split_independent(xs in prop::collection::vec(wide_float(), 1..200), cut in 0usize..200, seed in any::<u64>()) {
        let whole = exact_sum(&xs);
        let mut shuffled = xs.clone();
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(whole.to_bits(), exact_sum(&shuffled).to_bits());
        let cut = cut.min(xs.len());
        let mut left = ExactSum::new();
        xs[..cut].iter().for_each(|&x| left.add(x));
        let mut right = ExactSum::new();
        xs[cut..].iter().for_each(|&x| right.add(x));
        right.merge(&left);
        prop_assert_eq!(whole.to_bits(), right.value().to_bits());
    }

    #[test]
    fn exact_sum_cancels_exactly(xs in prop::collection::vec(wide_float(), 1..100), small in -1e-3f64..1e-3) {
        let mut all = xs.clone();
        all.push(small);
        all.extend(xs.iter().rev().map(|x| -x));
        prop_assert_eq!(exact_sum(&all), small);
    }

    #[test]
    fn ensemble_merge_is_bitwise_associative(
        records in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..60),
        cuts in prop::collection::vec(0usize..60, 0..5),
    ) {
        let trig = vec![false, true, true];
        let mut single = EnsembleStats::new(trig.clone());
        records.iter().for_each(|r| single.push(r));
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c.min(records.len())).collect();
        bounds.push(0);
        bounds.push(records.len());
        bounds.sort_unstable();
        let chunks: Vec<EnsembleStats> = bounds
            .windows(2)
            .map(|w| {
                let mut s = EnsembleStats::new(trig.clone());
                records[w[0]..w[1]].iter().for_each(|r| s.push(r));
                s
            })
            .collect();
        let merged = chunks.iter().rev().fold(EnsembleStats::new(trig.clone()), |acc, c| acc.merge(c));
        prop_assert_eq!(merged.count, single.count);
        for i in 0..3 {
            let a = merged.estimate(i).unwrap();
            let b = single.estimate(i).unwrap();
            prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
            prop_assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
            let ma = merged.central_moments(i);
            let mb = single.central_moments(i);
            prop_assert_eq!(ma.map(f64::to_bits), mb.map(f64::to_bits));
        }
        prop_assert_eq!(merged.characteristic(1).unwrap(), single.characteristic(1).unwrap());
        prop_assert!(merged.characteristic(0).is_err());
    }

    #[test]
    fn partition_tiles_the_light_cone(t in 2.0f64..200.0, delta in 0.05f64..0.95, n in 1usize..12) {
        let p = make_partition_with(t, delta, n).unwrap();
        let slabs = p.slabs();
        prop_assert!(p.n_rooms >= 1 && p.n_rooms <= n);
        prop_assert_eq!(p.reduced, p.n_rooms != n);
        prop_assert!(p.d > 0.0);
        prop_assert!((p.rho - t.powf(1.0 - delta)).abs() <= 1e-12 * t);
        prop_assert_eq!(slabs.len(), 2 * p.n_rooms - 1);
        prop_assert_eq!(slabs[0].lo, -t);
        prop_assert_eq!(slabs.last().unwrap().hi, t);
        for w in slabs.windows(2) {
            prop_assert!((w[0].hi - w[1].lo).abs() <= 1e-12 * t);
            prop_assert!(w[0].kind != w[1].kind);
        }
        for s in &slabs {
            let expect = if s.kind == SlabKind::Room { p.d } else { p.rho };
            prop_assert!((s.width() - expect).abs() <= 1e-9 * t, "{:?} vs {}", s, expect);
        }
        let total = p.n_rooms as f64 * p.d + (p.n_rooms as f64 - 1.0) * p.rho;
        prop_assert!((total - 2.0 * t).abs() <= 1e-12 * t);
    }

    #[test]
    fn cutoff_profile_contract(s in -10.0f64..10.0, a in 0.1f64..5.0, prof in profile()) {
        let p = cutoff_plus(s, a, prof);
        let m = cutoff_minus(s, a, prof);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(m, cutoff_plus(-s, a, prof));
        prop_assert!(cutoff_plus(s + 0.01, a, prof) >= p);
        if s >= a { prop_assert_eq!(p, 1.0); }
        if s <= -a { prop_assert_eq!(p, 0.0); }
        match prof {
            CutoffProfile::Smoothstep => prop_assert!((p + m - 1.0).abs() < 1e-14),
            CutoffProfile::PowerPreserving => prop_assert!((p * p + m * m - 1.0).abs() < 1e-14),
        }
    }

    #[test]
    fn splice_weights_are_mirrored_and_bounded(n in prop::sample::select(vec![16usize, 20, 32]), h in 0.25f64..2.0, frac in 0.05f64..0.24, prof in profile()) {
        let l = Lattice::new(n, h).unwrap();
        let a = frac * l.side();
        let (zm, zp) = splice_weights(&l, a, prof);
        for i in 0..n {
            prop_assert!((0.0..=1.0).contains(&zp[i]));
            let j = l.wrap(-l.signed(i));
            prop_assert_eq!(zm[i], zp[j]);
            let x = l.coord(i);
            if x.abs() <= l.side() / 4.0 {
                prop_assert_eq!(zp[i], cutoff_plus(x, a, prof));
            }
        }
    }

    #[test]
    fn sampled_spectra_are_hermitian(n in prop::sample::select(vec![8usize, 10, 12]), h in 0.5f64..2.0, width in 0.2f64..3.0, seed in any::<u64>(), stream in any::<u64>()) {
        let l = Lattice::new(n, h).unwrap();
        let values = (0..l.len()).map(|i| (-l.kappa(i).powi(2) * width).exp()).collect();
        let density = SpectralDensity::new(l, values).unwrap();
        let mut rng = RngStream::new(seed, stream).rng();
        let mut spec = sample_spectrum(&density, &mut rng);
        for i in 0..l.len() {
            prop_assert_eq!(spec[i], spec[l.partner(i)].conj());
        }
        Transform::new(l).inverse(&mut spec);
        let sup = spec.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
        let imag = spec.iter().fold(0.0f64, |m, z: &Complex64| m.max(z.im.abs()));
        prop_assert!(imag <= 1e-12 * sup.max(1e-300), "imag {} sup {}", imag, sup);
    }

    #[test]
    fn field_files_round_trip(n in prop::sample::select(vec![8usize, 10]), h in 0.01f64..10.0, data in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1000)) {
        let l = Lattice::new(n, h).unwrap();
        let u = &data[..l.len()];
        let v: Vec<f64> = u.iter().map(|x| -x).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_fields(&path, &l, &[("u", u), ("v", &v)], &[("t", format!("{h:?}"))]).unwrap();
        let f = read_fields(&path).unwrap();
        prop_assert_eq!(f.lattice, l);
        prop_assert_eq!(f.component("u").unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), u.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(f.component("v").unwrap(), &v[..]);
        prop_assert_eq!(&f.meta["t"], &format!("{h:?}"));
    }

    #[test]
    fn config_hash_tracks_content(seed in any::<u64>(), samples in 2u64..100_000) {
        let text = include_str!("../../../configs/smoke.toml");
        let base = ExperimentConfig::from_toml_str(text, &[]).unwrap();
        let over = ExperimentConfig::from_toml_str(text, &[format!("schedule.seed={seed}"), format!("schedule.samples={samples}")]).unwrap();
        prop_assert_eq!(over.schedule.seed, seed);
        prop_assert_eq!(over.schedule.samples, samples);
        prop_assert_eq!(base.hash() == over.hash(), seed == base.schedule.seed && samples == base.schedule.samples);
        let again = ExperimentConfig::from_toml_str(&over.to_toml_string().unwrap(), &[]).unwrap();
        prop_assert_eq!(again.hash(), over.hash());
    }
}
