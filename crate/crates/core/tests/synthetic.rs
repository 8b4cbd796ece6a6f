//! Frequency content of the procedural dataset: fakes lose mid-band
//! energy to the blur and gain energy at the stamped pattern frequencies.

use std::f64::consts::PI;

use fakesat::image_io::{partition_blocks, synth_tiles, Label, SynthParams};

const N: usize = 16;

/// Orthonormal 2-D DCT-II of the luminance of one block.
fn dct2(block: &[[f64; N]; N]) -> [[f64; N]; N] {
    let c = |k: usize| if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
    let mut out = [[0.0; N]; N];
    for (u, row) in out.iter_mut().enumerate() {
        for (v, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (y, line) in block.iter().enumerate() {
                for (x, p) in line.iter().enumerate() {
                    s += p
                        * ((2 * y + 1) as f64 * u as f64 * PI / (2 * N) as f64).cos()
                        * ((2 * x + 1) as f64 * v as f64 * PI / (2 * N) as f64).cos();
                }
            }
            *o = c(u) * c(v) * s;
        }
    }
    out
}

/// Mean DCT power per coefficient over all blocks of one class.
fn mean_power(label: Label) -> [[f64; N]; N] {
    let tiles = synth_tiles(12, 5, &SynthParams::default()).unwrap();
    let mut acc = [[0.0; N]; N];
    let mut count = 0.0;
    for t in tiles.iter().filter(|t| t.label == label) {
        for b in partition_blocks(t) {
            let mut lum = [[0.0; N]; N];
            for (y, row) in lum.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = (0..3).map(|c| b.pixels[[y, x, c]]).sum::<f64>() / 3.0;
                }
            }
            let d = dct2(&lum);
            for u in 0..N {
                for v in 0..N {
                    acc[u][v] += d[u][v] * d[u][v];
                }
            }
            count += 1.0;
        }
    }
    acc.map(|row| row.map(|p| p / count))
}

#[test]
fn fakes_shift_energy_from_mid_band_to_pattern() {
    let real = mean_power(Label::Real);
    let fake = mean_power(Label::Fake);
    // Checkerboard: highest frequency on both axes.
    assert!(fake[N - 1][N - 1] > 10.0 * real[N - 1][N - 1]);
    // Mid band away from the pattern columns (v = 8 for the period-4 stripes).
    let band = |p: &[[f64; N]; N]| -> f64 {
        (5..11).flat_map(|u| (5..11).map(move |v| (u, v))).filter(|&(_, v)| v != 8).map(|(u, v)| p[u][v]).sum()
    };
    assert!(band(&fake) < 0.5 * band(&real), "fake {} real {}", band(&fake), band(&real));
}
