//! Element radiation pattern, array responses, DFT codebooks, and spherical
//! coverage.
//!
//! Array responses follow the factored form
//! `a(phi, theta) = g_a(phi, theta) / sqrt(N_a) * a_z ⊗ a_y ⊗ a_x`
//! with half-wavelength element spacing baked into the `pi * k` phase terms.
//! Element indices and DFT beam indices are both row-major over
//! `(k_z, k_y, k_x)`, which fixes the global beam-index mapping.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{direction_to_panel_angles, DeviceDesign, PanelLayout, Pose, Vec3};

// ── Element pattern ─────────────────────────────────────────────────────────

/// Parametric single-element radiation pattern (3GPP-style patch element).
///
/// The pattern peaks at `(phi = 0, theta = pi/2)`, i.e. along the
/// panel-local `+x` axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementPattern {
    /// Peak element gain in dBi.
    pub g_max_dbi: f64,
    /// Vertical 3 dB beamwidth in degrees.
    pub theta_3db_deg: f64,
    /// Horizontal 3 dB beamwidth in degrees.
    pub phi_3db_deg: f64,
    /// Sidelobe attenuation floor of the vertical cut, dB.
    pub sla_v_db: f64,
    /// Overall front-to-back attenuation cap, dB.
    pub a_max_db: f64,
}

impl Default for ElementPattern {
    fn default() -> Self {
        ElementPattern {
            g_max_dbi: 8.0,
            theta_3db_deg: 65.0,
            phi_3db_deg: 65.0,
            sla_v_db: 30.0,
            a_max_db: 30.0,
        }
    }
}

/// Linear amplitude gain of the element at azimuth `phi` / zenith `theta`
/// (radians).
pub fn element_gain(pattern: &ElementPattern, phi: f64, theta: f64) -> f64 {
    let theta_deg = theta.to_degrees();
    let phi_deg = phi.to_degrees();
    let a_v = (12.0 * ((theta_deg - 90.0) / pattern.theta_3db_deg).powi(2)).min(pattern.sla_v_db);
    let a_h = (12.0 * (phi_deg / pattern.phi_3db_deg).powi(2)).min(pattern.a_max_db);
    let attenuation_db = (a_v + a_h).min(pattern.a_max_db);
    let gain_db = pattern.g_max_dbi - attenuation_db;
    10f64.powf(gain_db / 20.0)
}

// ── Steering vectors and array response ─────────────────────────────────────

/// Per-axis steering vector: entry `k` is `exp(j * pi * k * phase_arg)`.
pub fn steering_axis(n: usize, phase_arg: f64) -> Result<Vec<Complex64>> {
    if n == 0 {
        return Err(Error::EmptyAxis);
    }
    Ok((0..n)
        .map(|k| Complex64::from_polar(1.0, PI * k as f64 * phase_arg))
        .collect())
}

/// Full array response of a panel at panel-local angles `(phi, theta)`.
///
/// Entries are ordered row-major over `(k_z, k_y, k_x)`; the Euclidean norm
/// of the result equals the element amplitude gain.
pub fn array_response(
    panel: &PanelLayout,
    pattern: &ElementPattern,
    phi: f64,
    theta: f64,
) -> Vec<Complex64> {
    let [nx, ny, nz] = panel.grid;
    let n_a = panel.num_elements();
    let scale = element_gain(pattern, phi, theta) / (n_a as f64).sqrt();
    let arg_x = theta.sin() * phi.cos();
    let arg_y = theta.sin() * phi.sin();
    let arg_z = theta.cos();
    let mut out = Vec::with_capacity(n_a);
    for kz in 0..nz {
        for ky in 0..ny {
            for kx in 0..nx {
                let phase = PI * (kx as f64 * arg_x + ky as f64 * arg_y + kz as f64 * arg_z);
                out.push(Complex64::from_polar(scale, phase));
            }
        }
    }
    out
}

// ── Codebooks ───────────────────────────────────────────────────────────────

/// A set of analog beamforming/combining vectors.
///
/// For a union codebook over several panels, `panel_of[j]` names the panel
/// owning beam `j`; single-panel codebooks use panel index 0 throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Vec<Vec<Complex64>>,
    pub panel_of: Vec<usize>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// DFT codebook of one panel: per-axis DFT matrices combined in the
/// `z ⊗ y ⊗ x` axis order, one beam per element, entries of modulus
/// `1/sqrt(N_a)`.
///
/// Beam indices are row-major over the `(k_z, k_y, k_x)` DFT indices.
pub fn dft_codebook(panel: &PanelLayout) -> Codebook {
    let [nx, ny, nz] = panel.grid;
    let n_a = panel.num_elements();
    let scale = 1.0 / (n_a as f64).sqrt();
    let mut vectors = Vec::with_capacity(n_a);
    for bz in 0..nz {
        for by in 0..ny {
            for bx in 0..nx {
                let mut v = Vec::with_capacity(n_a);
                for kz in 0..nz {
                    for ky in 0..ny {
                        for kx in 0..nx {
                            let frac = (kx * bx) as f64 / nx as f64
                                + (ky * by) as f64 / ny as f64
                                + (kz * bz) as f64 / nz as f64;
                            v.push(Complex64::from_polar(scale, TAU * frac));
                        }
                    }
                }
                vectors.push(v);
            }
        }
    }
    let panel_of = vec![0; n_a];
    Codebook { vectors, panel_of }
}

/// Union codebook over all panels of a device, in panel order.
pub fn ut_union_codebook(design: &DeviceDesign) -> Codebook {
    let mut vectors = Vec::with_capacity(design.total_elements());
    let mut panel_of = Vec::with_capacity(design.total_elements());
    for (p, panel) in design.panels.iter().enumerate() {
        let cb = dft_codebook(panel);
        for v in cb.vectors {
            vectors.push(v);
            panel_of.push(p);
        }
    }
    Codebook { vectors, panel_of }
}

/// Export a codebook as CSV rows of `beam index, re, im, re, im, ...`.
pub fn export_codebook_csv<W: Write>(codebook: &Codebook, mut w: W) -> Result<()> {
    for (idx, v) in codebook.vectors.iter().enumerate() {
        write!(w, "{idx}")?;
        for c in v {
            write!(w, ",{},{}", c.re, c.im)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

// ── Spherical coverage ──────────────────────────────────────────────────────

/// One probed direction of a coverage map with its best achievable
/// array-factor power gain in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveragePoint {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub max_gain_db: f64,
}

/// Spherical coverage of a device: per-direction best beam gain plus its
/// distribution over the probe grid.
#[derive(Debug, Clone)]
pub struct Coverage {
    pub step_deg: f64,
    pub points: Vec<CoveragePoint>,
}

impl Coverage {
    /// Gain value (dB) at quantile `q` of the empirical distribution over
    /// grid directions.
    pub fn percentile(&self, q: f64) -> f64 {
        let mut gains: Vec<f64> = self.points.iter().map(|p| p.max_gain_db).collect();
        gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((gains.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize;
        gains[idx]
    }

    /// Write the map as CSV with an `azimuth,elevation,max_gain_db` header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "azimuth,elevation,max_gain_db")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.azimuth_deg, p.elevation_deg, p.max_gain_db)?;
        }
        Ok(())
    }
}

/// Best combining power gain `max_j |v_j^H a^{(p(j))}(dir)|^2` over all UT
/// beams, for a device-frame unit direction.
pub fn max_gain_at(design: &DeviceDesign, pattern: &ElementPattern, dir: Vec3) -> f64 {
    let pose = Pose::new(Vec3::ZERO, [0.0; 3]);
    let mut best: f64 = 0.0;
    for panel in &design.panels {
        let (phi, theta) = direction_to_panel_angles(dir, &pose, panel)
            .expect("probe direction is unit by construction");
        let a = array_response(panel, pattern, phi, theta);
        for v in &dft_codebook(panel).vectors {
            let inner: Complex64 = v.iter().zip(&a).map(|(vi, ai)| vi.conj() * ai).sum();
            best = best.max(inner.norm_sqr());
        }
    }
    best
}

/// Sample the spherical coverage of a device on a regular azimuth/elevation
/// grid with the given angular step (degrees).
///
/// The grid has `360/step` azimuth values in `[-180, 180)` and
/// `180/step + 1` elevation values in `[-90, 90]`; `step` must divide both
/// spans evenly.
pub fn spherical_coverage(
    design: &DeviceDesign,
    pattern: &ElementPattern,
    step_deg: f64,
) -> Result<Coverage> {
    if step_deg <= 0.0
        || (360.0 / step_deg).fract().abs() > 1e-9
        || (180.0 / step_deg).fract().abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "coverage step {step_deg} must divide 360 and 180 evenly"
        )));
    }
    let n_az = (360.0 / step_deg).round() as usize;
    let n_el = (180.0 / step_deg).round() as usize + 1;
    let mut points = Vec::with_capacity(n_az * n_el);
    for ia in 0..n_az {
        let az = -180.0 + ia as f64 * step_deg;
        for ie in 0..n_el {
            let el = -90.0 + ie as f64 * step_deg;
            let (saz, caz) = az.to_radians().sin_cos();
            let (sel, cel) = el.to_radians().sin_cos();
            let dir = Vec3::new(cel * caz, cel * saz, sel);
            let gain = max_gain_at(design, pattern, dir.normalized());
            points.push(CoveragePoint {
                azimuth_deg: az,
                elevation_deg: el,
                max_gain_db: 10.0 * gain.log10(),
            });
        }
    }
    Ok(Coverage {
        step_deg,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, rotation_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn pattern() -> ElementPattern {
        ElementPattern::default()
    }

    fn ula4() -> PanelLayout {
        PanelLayout::new([4, 1, 1], Vec3::X, Mat3::IDENTITY).unwrap()
    }

    #[test]
    fn element_gain_at_boresight() {
        let g = element_gain(&pattern(), 0.0, FRAC_PI_2);
        assert!((g - 10f64.powf(8.0 / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn element_gain_back_lobe_hits_floor() {
        let g = element_gain(&pattern(), PI, FRAC_PI_2);
        assert!((g - 10f64.powf((8.0 - 30.0) / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn element_gain_even_in_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let phi = rng.gen_range(-PI..PI);
            let theta = rng.gen_range(0.0..PI);
            assert_eq!(
                element_gain(&pattern(), phi, theta),
                element_gain(&pattern(), -phi, theta)
            );
        }
    }

    #[test]
    fn steering_axis_basics() {
        assert_eq!(steering_axis(1, 0.37).unwrap(), vec![Complex64::new(1.0, 0.0)]);
        let ones = steering_axis(4, 0.0).unwrap();
        for c in ones {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let pm = steering_axis(2, 1.0).unwrap();
        assert!((pm[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((pm[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
        assert!(matches!(steering_axis(0, 0.5), Err(Error::EmptyAxis)));
    }

    #[test]
    fn array_response_norm_equals_element_gain() {
        let panels = [
            ula4(),
            PanelLayout::new([2, 2, 1], Vec3::Z, Mat3::IDENTITY).unwrap(),
            PanelLayout::new([1, 8, 8], Vec3::X, Mat3::IDENTITY).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for panel in &panels {
            for _ in 0..50 {
                let phi = rng.gen_range(-PI..PI);
                let theta = rng.gen_range(0.0..PI);
                let a = array_response(panel, &pattern(), phi, theta);
                let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                assert!((norm - element_gain(&pattern(), phi, theta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ula_endfire_phases_alternate() {
        // {4,1,1} at (phi=0, theta=pi/2): phase argument is exactly 1, so
        // entries carry phases 0, pi, 2pi, 3pi.
        let a = array_response(&ula4(), &pattern(), 0.0, FRAC_PI_2);
        let g = element_gain(&pattern(), 0.0, FRAC_PI_2);
        for (k, c) in a.iter().enumerate() {
            let want = if k % 2 == 0 { g / 2.0 } else { -g / 2.0 };
            assert!((c.re - want).abs() < 1e-9, "entry {k}");
            assert!(c.im.abs() < 1e-9);
        }
    }

    #[test]
    fn upa_221_at_zero_zenith_is_uniform() {
        // theta = 0 zeroes the x/y phase arguments and N_z = 1 leaves no
        // z phasing; direct evaluation of the per-axis vectors.
        let panel = PanelLayout::new([2, 2, 1], Vec3::Z, Mat3::IDENTITY).unwrap();
        let a = array_response(&panel, &pattern(), 0.3, 0.0);
        let g = element_gain(&pattern(), 0.3, 0.0);
        for c in &a {
            assert!((c - Complex64::new(g / 2.0, 0.0)).norm() < 1e-12);
        }
    }

    fn gram_defect(cb: &Codebook) -> f64 {
        let n = cb.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g: Complex64 = cb.vectors[i]
                    .iter()
                    .zip(&cb.vectors[j])
                    .map(|(a, b)| a.conj() * b)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - Complex64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    #[test]
    fn dft_codebook_of_ula_is_unitary_dft() {
        let cb = dft_codebook(&ula4());
        assert_eq!(cb.len(), 4);
        for (b, v) in cb.vectors.iter().enumerate() {
            for (k, c) in v.iter().enumerate() {
                let want = Complex64::from_polar(0.5, TAU * (b * k) as f64 / 4.0);
                assert!((c - want).norm() < 1e-12);
            }
        }
        assert!(gram_defect(&cb) < 1e-10);
    }

    #[test]
    fn codebook_entries_have_constant_modulus() {
        let designs = [DeviceDesign::edge(), DeviceDesign::edge_face()];
        for design in &designs {
            let cb = ut_union_codebook(design);
            for (j, v) in cb.vectors.iter().enumerate() {
                let n_a = design.panels[cb.panel_of[j]].num_elements() as f64;
                for c in v {
                    assert!((c.norm() - 1.0 / n_a.sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ap_codebook_is_kron_of_two_dfts() {
        let ap = PanelLayout::new([1, 8, 8], Vec3::X, Mat3::IDENTITY).unwrap();
        let cb = dft_codebook(&ap);
        assert_eq!(cb.len(), 64);
        // Kronecker structure: beam (bz, by) entry (kz, ky) must equal the
        // product of two independent 8-point DFT entries.
        let dft8 = |b: usize, k: usize| Complex64::from_polar(1.0, TAU * (b * k) as f64 / 8.0);
        for bz in 0..8 {
            for by in 0..8 {
                let v = &cb.vectors[bz * 8 + by];
                for kz in 0..8 {
                    for ky in 0..8 {
                        let want = dft8(bz, kz) * dft8(by, ky) / 8.0;
                        assert!((v[kz * 8 + ky] - want).norm() < 1e-12);
                    }
                }
            }
        }
        assert!(gram_defect(&cb) < 1e-10);
    }

    #[test]
    fn codebook_parseval_over_random_directions() {
        let panels = [ula4(), PanelLayout::new([1, 8, 8], Vec3::X, Mat3::IDENTITY).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for panel in &panels {
            let cb = dft_codebook(panel);
            for _ in 0..50 {
                let phi = rng.gen_range(-PI..PI);
                let theta = rng.gen_range(0.0..PI);
                let a = array_response(panel, &pattern(), phi, theta);
                let total: f64 = cb
                    .vectors
                    .iter()
                    .map(|v| {
                        v.iter()
                            .zip(&a)
                            .map(|(vi, ai)| vi.conj() * ai)
                            .sum::<Complex64>()
                            .norm_sqr()
                    })
                    .sum();
                let g2 = element_gain(&pattern(), phi, theta).powi(2);
                assert!((total - g2).abs() <= 1e-9 * g2.max(1.0));
            }
        }
    }

    #[test]
    fn union_codebook_sizes() {
        assert_eq!(ut_union_codebook(&DeviceDesign::edge()).len(), 12);
        let cb = ut_union_codebook(&DeviceDesign::edge_face());
        assert_eq!(cb.len(), 20);
        assert_eq!(cb.panel_of[0], 0);
        assert_eq!(cb.panel_of[12], 3);
        assert_eq!(cb.panel_of[19], 4);
    }

    #[test]
    fn single_element_coverage_equals_element_pattern() {
        let design = DeviceDesign::from_json_str(
            r#"{"name":"single","panels":[{"grid":[1,1,1],"boresight":[1.0,0.0,0.0],
                "local_axes":[[1,0,0],[0,1,0],[0,0,1]]}]}"#,
        )
        .unwrap();
        let pose = Pose::new(Vec3::ZERO, [0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let dir = v.normalized();
            let (phi, theta) = direction_to_panel_angles(dir, &pose, &design.panels[0]).unwrap();
            let want = element_gain(&pattern(), phi, theta).powi(2);
            let got = max_gain_at(&design, &pattern(), dir);
            assert!((got - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn coverage_grid_shape_and_csv() {
        let cov = spherical_coverage(&DeviceDesign::edge(), &pattern(), 30.0).unwrap();
        assert_eq!(cov.points.len(), (360 / 30) * (180 / 30 + 1));
        let mut buf = Vec::new();
        cov.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("azimuth,elevation,max_gain_db\n"));
        assert_eq!(text.lines().count(), cov.points.len() + 1);
        assert!(spherical_coverage(&DeviceDesign::edge(), &pattern(), 7.0).is_err());
    }

    #[test]
    fn coverage_is_invariant_under_rigid_rotation() {
        let design = DeviceDesign::edge_face();
        let rot = rotation_matrix([0.7, -0.3, 1.9]);
        let rotated = DeviceDesign {
            name: design.name.clone(),
            panels: design
                .panels
                .iter()
                .map(|p| {
                    PanelLayout::new(
                        p.grid,
                        rot.mul_vec(p.boresight),
                        rot.mul_mat(&p.local_axes),
                    )
                    .unwrap()
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let dir = v.normalized();
            let g0 = max_gain_at(&design, &pattern(), dir);
            let g1 = max_gain_at(&rotated, &pattern(), rot.mul_vec(dir).normalized());
            assert!((g0 - g1).abs() < 1e-9 * g0.max(1.0));
        }
    }

    #[test]
    fn edge_design_has_bottom_hole_and_edge_face_fills_low_tail() {
        let pat = pattern();
        let edge = DeviceDesign::edge();
        let edge_face = DeviceDesign::edge_face();
        // Toward -y-and-below there is no edge panel looking that way.
        let hole = Vec3::new(0.0, -1.0, -1.0).normalized();
        let best = max_gain_at(&edge, &pat, hole);
        let forward = max_gain_at(&edge, &pat, Vec3::X);
        assert!(
            10.0 * (forward / best).log10() > 15.0,
            "expected a deep hole toward -y/-z"
        );
        // Adding panels can only help, and must help in the low-gain tail.
        let cov_e = spherical_coverage(&edge, &pat, 10.0).unwrap();
        let cov_ef = spherical_coverage(&edge_face, &pat, 10.0).unwrap();
        assert!(cov_ef.percentile(0.05) >= cov_e.percentile(0.05));
        assert!(cov_ef.percentile(0.05) > cov_e.percentile(0.05) + 1.0);
    }

    #[test]
    fn codebook_csv_export_shape() {
        let cb = dft_codebook(&ula4());
        let mut buf = Vec::new();
        export_codebook_csv(&cb, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 1 + 2 * 4);
        assert!(lines[0].starts_with("0,"));
    }
}
