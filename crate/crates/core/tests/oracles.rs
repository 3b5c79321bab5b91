//! Checks against reference values computed at 50 significant digits by
//! `tests/oracle/gen_oracles.py` and rounded to the nearest f64.

use vlprobe::numeric::{cosine, softmax_row};
use vlprobe::rope::make_thetas;

const THETAS_16: [f64; 8] = [
    1.0,
    0.31622776601683794,
    0.1,
    0.03162277660168379,
    0.01,
    0.0031622776601683794,
    0.001,
    0.00031622776601683794,
];
const THETAS_64: [f64; 32] = [
    1.0,
    0.7498942093324559,
    0.5623413251903491,
    0.4216965034285822,
    0.31622776601683794,
    0.23713737056616552,
    0.1778279410038923,
    0.1333521432163324,
    0.1,
    0.07498942093324558,
    0.05623413251903491,
    0.042169650342858224,
    0.03162277660168379,
    0.023713737056616554,
    0.01778279410038923,
    0.01333521432163324,
    0.01,
    0.007498942093324558,
    0.005623413251903491,
    0.004216965034285823,
    0.0031622776601683794,
    0.0023713737056616554,
    0.0017782794100389228,
    0.001333521432163324,
    0.001,
    0.0007498942093324559,
    0.0005623413251903491,
    0.00042169650342858224,
    0.00031622776601683794,
    0.00023713737056616554,
    0.00017782794100389227,
    0.0001333521432163324,
];
const SOFTMAX_WIDE: [f64; 5] = [
    0.4223187982515182,
    0.15536240349696362,
    0.0,
    0.0,
    0.4223187982515182,
];
const SOFTMAX_SMALL: [f64; 4] = [
    0.25425209060945353,
    0.2809920164015025,
    0.3105442047383759,
    0.15421168825066808,
];
const COSINE_SKEW: f64 = 0.3411281728644042;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn frequency_tables_match_reference() {
    let t4 = make_thetas(4, 10_000.0).unwrap();
    assert!((t4.thetas()[0] - 1.0).abs() <= 1e-15);
    assert!((t4.thetas()[1] - 0.01).abs() <= 1e-15);
    for (d, want) in [(16, &THETAS_16[..]), (64, &THETAS_64[..])] {
        let got = make_thetas(d, 10_000.0).unwrap();
        for (g, w) in got.thetas().iter().zip(want) {
            assert!(close(*g, *w, 4e-16), "d={d}: {g} vs {w}");
        }
    }
}

#[test]
fn softmax_matches_reference() {
    let wide = softmax_row(&[1000.0, 999.0, -5.0, 0.5, 1000.0]).unwrap();
    for (g, w) in wide.iter().zip(SOFTMAX_WIDE) {
        assert!((g - w).abs() <= 1e-15, "{g} vs {w}");
    }
    let small = softmax_row(&[0.1, 0.2, 0.3, -0.4]).unwrap();
    for (g, w) in small.iter().zip(SOFTMAX_SMALL) {
        assert!(close(*g, w, 1e-15), "{g} vs {w}");
    }
}

#[test]
fn cosine_matches_reference() {
    let c = cosine(&[1e-3, 2.0, -3.5, 7.25], &[4.0, -1e-2, 0.5, 2.0]).unwrap();
    assert!(close(c, COSINE_SKEW, 1e-15));
}
