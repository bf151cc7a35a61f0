use bspmpnet_demo::*;

#[test]
fn spectrogram_shapes_and_boost() {
    let x = make_demo_signal(0.5, 5.0, 7).unwrap();
    assert_eq!(x.len(), 8000);
    let s = make_spectrogram(&x, 512, 128).unwrap();
    assert_eq!(s.bins(), 257);
    assert_eq!(s.compressed().len(), s.bins() * s.frames());
    let gains = s.gains();
    let (c, b) = (s.compressed(), s.boosted());
    for k in [0, 40, 256] {
        for t in [0, s.frames() - 1] {
            let i = k * s.frames() + t;
            assert!((b[i] - c[i] * gains[k]).abs() <= 1e-5 * b[i].abs().max(1.0));
        }
    }
    assert!(s.peak() >= c.iter().copied().fold(0.0, f32::max));
    assert!(make_spectrogram(&x, 512, 0).is_err());
}

#[test]
fn lsigmoid_curve_is_bounded_and_centred() {
    let alpha = 2.0;
    let ys = make_lsigmoid_curve(alpha, 1.0, -4.0, 4.0, 801).unwrap();
    assert!(ys.iter().all(|&y| y > 0.0 && y < 1.0));
    assert!(ys.windows(2).all(|w| w[1] >= w[0]));
    // t = 1 / alpha = 0.5 sits at index 450 of the 0.01 grid.
    assert!((ys[450] - 0.5).abs() < 1e-9);
    assert!(make_lsigmoid_curve(1.0, 1.0, 1.0, 1.0, 10).is_err());
}

#[test]
fn bif_gains_cover_every_bin() {
    let g = make_bif_gains_for(512).unwrap();
    assert_eq!(g.len(), 257);
    assert!(g.iter().all(|&v| v > 0.0));
    assert_eq!(sample_rate(), 16_000);
}

#[test]
fn demo_signal_is_seeded() {
    assert_eq!(make_demo_signal(0.1, 0.0, 1).unwrap(), make_demo_signal(0.1, 0.0, 1).unwrap());
    assert_ne!(make_demo_signal(0.1, 0.0, 1).unwrap(), make_demo_signal(0.1, 0.0, 2).unwrap());
    assert!(make_demo_signal(0.0, 0.0, 1).is_err());
}
