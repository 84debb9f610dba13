//! Multipath synthesis and received-signal-strength measurements.
//!
//! Rays come from an image-method tracer over an empty shoebox room (LOS
//! plus specular wall reflections up to second order) or from an external
//! ray dump. Per-panel channel matrices are assembled from the rays, and
//! RSS tables hold `|sqrt(P) v^H H u + v^H n|^2` for every beam pair.
//!
//! Second-order reflections combine walls on two distinct axes; the
//! same-axis double bounce is deliberately not generated, which pins the
//! path count at 1 / 7 / 19 for reflection orders 0 / 1 / 2 with both
//! endpoints strictly inside the room.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::antenna::{array_response, Codebook, ElementPattern};
use crate::error::{Error, Result};
use crate::geometry::{
    direction_to_panel_angles, DeviceDesign, Mat3, PanelLayout, Pose, Vec3,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// dBm (or dB) to linear scale; `-inf` maps to 0.
pub fn dbm_to_linear(dbm: f64) -> f64 {
    if dbm == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(dbm / 10.0)
    }
}

/// Linear to dBm (or dB); 0 maps to `-inf`.
pub fn linear_to_dbm(linear: f64) -> f64 {
    if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// Derive an independent substream seed from a base seed, splitmix-style.
/// Used to give every (sample, measurement) its own deterministic noise
/// stream regardless of scheduling.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(seed ^ splitmix64(stream))
}

// ── Scene ───────────────────────────────────────────────────────────────────

/// How path phases are assigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseMode {
    /// `-2*pi*d/lambda mod 2*pi`, fully determined by the geometry.
    FromPathLength,
    /// Uniform random phases from a stream derived from the given seed and
    /// the UT pose, so tracing stays deterministic per (scene, pose).
    UniformRandom { seed: u64 },
}

/// Static propagation scenario: room, AP, and tracer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Room extents in meters; walls at 0 and the extent on each axis.
    pub room: Vec3,
    pub ap_pose: Pose,
    pub ap_panel: PanelLayout,
    /// Power lost per wall bounce, dB.
    pub reflection_loss_db: f64,
    pub carrier_hz: f64,
    /// Maximum reflection order (0, 1 or 2).
    pub max_order: u8,
    pub phase_mode: PhaseMode,
}

impl Scene {
    /// The default indoor scenario: a 7x7x3 m living room with the AP
    /// centered on the `x = 0` wall looking into the room.
    pub fn living_room() -> Self {
        Scene {
            room: Vec3::new(7.0, 7.0, 3.0),
            ap_pose: Pose::new(Vec3::new(0.0, 3.5, 2.0), [0.0; 3]),
            ap_panel: PanelLayout::new([1, 8, 8], Vec3::X, Mat3::IDENTITY).unwrap(),
            reflection_loss_db: 10.0,
            carrier_hz: 60e9,
            max_order: 2,
            phase_mode: PhaseMode::FromPathLength,
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    fn contains(&self, p: Vec3) -> bool {
        (0.0..=self.room.x).contains(&p.x)
            && (0.0..=self.room.y).contains(&p.y)
            && (0.0..=self.room.z).contains(&p.z)
    }
}

// ── Paths ───────────────────────────────────────────────────────────────────

/// One multipath component between the AP and the UT.
///
/// The path power is kept in dB form as the canonical representation so the
/// ray-dump round trip is bit exact; [`Path::rho`] yields the linear value.
/// `aod_el` is the zenith angle in the AP local frame (the same convention
/// the array response uses).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub power_dbm: f64,
    pub phase_rad: f64,
    pub aod_az: f64,
    pub aod_el: f64,
    /// Unit vector in the GCS pointing from the UT toward the apparent
    /// source.
    pub aoa_dir: Vec3,
    pub is_los: bool,
}

impl Path {
    /// Linear received-power coefficient `rho`.
    pub fn rho(&self) -> f64 {
        dbm_to_linear(self.power_dbm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Wall {
    axis: usize,
    at_max: bool,
}

const WALLS: [Wall; 6] = [
    Wall { axis: 0, at_max: false },
    Wall { axis: 0, at_max: true },
    Wall { axis: 1, at_max: false },
    Wall { axis: 1, at_max: true },
    Wall { axis: 2, at_max: false },
    Wall { axis: 2, at_max: true },
];

fn axis_get(v: Vec3, axis: usize) -> f64 {
    match axis {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    }
}

fn axis_set(v: &mut Vec3, axis: usize, value: f64) {
    match axis {
        0 => v.x = value,
        1 => v.y = value,
        _ => v.z = value,
    }
}

fn mirror(p: Vec3, wall: Wall, room: Vec3) -> Vec3 {
    let plane = if wall.at_max { axis_get(room, wall.axis) } else { 0.0 };
    let mut out = p;
    axis_set(&mut out, wall.axis, 2.0 * plane - axis_get(p, wall.axis));
    out
}

/// A reflection off `wall` is realizable only when both endpoints sit
/// strictly off that wall plane (a wall-mounted AP cannot bounce off its
/// own wall).
fn wall_usable(wall: Wall, a: Vec3, b: Vec3, room: Vec3) -> bool {
    let plane = if wall.at_max { axis_get(room, wall.axis) } else { 0.0 };
    const EPS: f64 = 1e-9;
    (axis_get(a, wall.axis) - plane).abs() > EPS && (axis_get(b, wall.axis) - plane).abs() > EPS
}

/// Trace LOS plus image-method wall reflections up to `scene.max_order`.
///
/// Paths are returned in a fixed order: LOS first, then first-order walls,
/// then second-order wall pairs, so the result is deterministic for a given
/// scene and pose.
pub fn trace_rays(scene: &Scene, ut_pose: &Pose) -> Result<Vec<Path>> {
    if !scene.contains(ut_pose.position) || !scene.contains(scene.ap_pose.position) {
        return Err(Error::PoseOutOfBounds);
    }
    let ap = scene.ap_pose.position;
    let ut = ut_pose.position;

    let mut images: Vec<(Vec3, Vec3, u8)> = vec![(ap, ut, 0)];
    if scene.max_order >= 1 {
        for w in WALLS {
            if wall_usable(w, ap, ut, scene.room) {
                images.push((mirror(ap, w, scene.room), mirror(ut, w, scene.room), 1));
            }
        }
    }
    if scene.max_order >= 2 {
        for (i, wa) in WALLS.iter().enumerate() {
            for wb in &WALLS[i + 1..] {
                if wa.axis == wb.axis {
                    continue;
                }
                if wall_usable(*wa, ap, ut, scene.room) && wall_usable(*wb, ap, ut, scene.room) {
                    let src = mirror(mirror(ap, *wa, scene.room), *wb, scene.room);
                    let dst = mirror(mirror(ut, *wa, scene.room), *wb, scene.room);
                    images.push((src, dst, 2));
                }
            }
        }
    }

    let lambda = scene.wavelength();
    let mut paths = Vec::with_capacity(images.len());
    for (idx, (src_image, ut_image, bounces)) in images.into_iter().enumerate() {
        let d = (src_image - ut).norm();
        let friis_db = 20.0 * (4.0 * std::f64::consts::PI * d / lambda).log10();
        let power_dbm = -(friis_db + bounces as f64 * scene.reflection_loss_db);
        let phase_rad = match scene.phase_mode {
            PhaseMode::FromPathLength => {
                (-std::f64::consts::TAU * d / lambda).rem_euclid(std::f64::consts::TAU)
            }
            PhaseMode::UniformRandom { seed } => {
                let pose_bits = ut_pose
                    .position
                    .to_array()
                    .iter()
                    .chain(ut_pose.rotation.iter())
                    .fold(0u64, |acc, v| derive_seed(acc, v.to_bits()));
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(seed, pose_bits),
                    idx as u64,
                ));
                use rand::SeedableRng;
                let _ = &mut rng;
                rng.gen_range(0.0..std::f64::consts::TAU)
            }
        };
        let aoa_dir = (src_image - ut) * (1.0 / d);
        let dep_dir = (ut_image - ap) * (1.0 / (ut_image - ap).norm());
        let (aod_az, aod_el) =
            direction_to_panel_angles(dep_dir, &scene.ap_pose, &scene.ap_panel)?;
        paths.push(Path {
            power_dbm,
            phase_rad,
            aod_az,
            aod_el,
            aoa_dir,
            is_los: bounces == 0,
        });
    }
    Ok(paths)
}

// ── Channel assembly ────────────────────────────────────────────────────────

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `v^H * self` for a combiner of length `rows`.
    pub fn combine_left(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols];
        for (r, vr) in v.iter().enumerate() {
            let w = vr.conj();
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, h) in out.iter_mut().zip(row) {
                *o += w * h;
            }
        }
        out
    }
}

/// Per-panel channel matrices `H^{(p)}` of shape `N_UT^{(p)} x N_AP`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub per_panel: Vec<CMat>,
    pub n_ap: usize,
}

/// Assemble per-panel channel matrices from a path list.
///
/// An empty path list yields zero matrices.
pub fn assemble_channel(
    paths: &[Path],
    scene: &Scene,
    ut_pose: &Pose,
    design: &DeviceDesign,
    pattern: &ElementPattern,
) -> Result<ChannelMatrix> {
    let n_ap = scene.ap_panel.num_elements();
    let mut per_panel: Vec<CMat> = design
        .panels
        .iter()
        .map(|p| CMat::zeros(p.num_elements(), n_ap))
        .collect();

    for path in paths {
        let weight = Complex64::from_polar(path.rho().sqrt(), path.phase_rad);
        let a_ap = array_response(&scene.ap_panel, pattern, path.aod_az, path.aod_el);
        for (panel, h) in design.panels.iter().zip(per_panel.iter_mut()) {
            let (phi, theta) = direction_to_panel_angles(path.aoa_dir, ut_pose, panel)?;
            let a_ut = array_response(panel, pattern, phi, theta);
            for (r, ar) in a_ut.iter().enumerate() {
                let wr = weight * ar;
                let row = &mut h.data[r * n_ap..(r + 1) * n_ap];
                for (cell, ac) in row.iter_mut().zip(&a_ap) {
                    *cell += wr * ac.conj();
                }
            }
        }
    }
    Ok(ChannelMatrix { per_panel, n_ap })
}

// ── RSS tables ──────────────────────────────────────────────────────────────

/// Received signal strengths for every `(AP beam, UT beam)` pair of one
/// sample, stored in dBm (row-major over `(i, j)`).
#[derive(Debug, Clone, PartialEq)]
pub struct RssTable {
    pub n_ap: usize,
    pub n_ut: usize,
    pub values_dbm: Vec<f64>,
    /// Panel owning each UT combiner index.
    pub panel_of: Vec<usize>,
    /// Seed of the measurement-noise stream attached to this sample.
    pub noise_seed: u64,
}

impl RssTable {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_ut + j
    }

    pub fn dbm(&self, i: usize, j: usize) -> f64 {
        self.values_dbm[self.idx(i, j)]
    }

    pub fn linear(&self, i: usize, j: usize) -> f64 {
        dbm_to_linear(self.dbm(i, j))
    }

    pub fn is_all_zero(&self) -> bool {
        self.values_dbm.iter().all(|&v| v == f64::NEG_INFINITY)
    }
}

/// Measure Eq.-style RSS for every beam pair: `|sqrt(P) v_j^H H^{(p(j))}
/// u_i s + v_j^H n|^2` with `s = 1`.
///
/// With `noisy` set, `n` is a fresh circularly-symmetric complex Gaussian
/// vector (per-element variance `sigma_n^2`) for every `(i, j)`; otherwise
/// `n = 0`.
pub fn measure_rss<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    ap_codebook: &Codebook,
    ut_codebook: &Codebook,
    p_ap_dbm: f64,
    sigma_n_dbm: f64,
    rng: &mut R,
    noisy: bool,
) -> Result<RssTable> {
    let n_ap = ap_codebook.len();
    let n_ut = ut_codebook.len();
    for u in &ap_codebook.vectors {
        if u.len() != h.n_ap {
            return Err(Error::DimensionMismatch(format!(
                "AP beam length {} vs {} AP elements",
                u.len(),
                h.n_ap
            )));
        }
    }
    for (j, v) in ut_codebook.vectors.iter().enumerate() {
        let p = ut_codebook.panel_of[j];
        let rows = h
            .per_panel
            .get(p)
            .ok_or_else(|| Error::DimensionMismatch(format!("combiner {j} names panel {p}")))?
            .rows;
        if v.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "combiner {j} length {} vs panel {p} size {rows}",
                v.len()
            )));
        }
    }

    let p_ap = dbm_to_linear(p_ap_dbm);
    let sigma = dbm_to_linear(sigma_n_dbm).sqrt();
    let amp = p_ap.sqrt();

    // v^H H per combiner, reused across AP beams.
    let combined: Vec<Vec<Complex64>> = ut_codebook
        .vectors
        .iter()
        .enumerate()
        .map(|(j, v)| h.per_panel[ut_codebook.panel_of[j]].combine_left(v))
        .collect();

    let mut values = vec![0.0; n_ap * n_ut];
    for i in 0..n_ap {
        let u = &ap_codebook.vectors[i];
        for j in 0..n_ut {
            let x: Complex64 = combined[j].iter().zip(u).map(|(r, ui)| r * ui).sum();
            let mut y = x * amp;
            if noisy {
                let v = &ut_codebook.vectors[j];
                let mut combined_noise = Complex64::new(0.0, 0.0);
                for vr in v {
                    let g_re: f64 = rng.sample(StandardNormal);
                    let g_im: f64 = rng.sample(StandardNormal);
                    let n = Complex64::new(g_re, g_im) * (sigma / 2f64.sqrt());
                    combined_noise += vr.conj() * n;
                }
                y += combined_noise;
            }
            values[i * n_ut + j] = linear_to_dbm(y.norm_sqr());
        }
    }
    Ok(RssTable {
        n_ap,
        n_ut,
        values_dbm: values,
        panel_of: ut_codebook.panel_of.clone(),
        noise_seed: 0,
    })
}

/// Reconstruct one noisy measurement from a stored noiseless RSS value.
///
/// Measurement noise is circularly symmetric, so combining the stored
/// magnitude with a fresh complex Gaussian drawn from the per-pair stream
/// `(noise_seed, i, j)` reproduces the Eq.-7 distribution exactly while
/// staying independent of evaluation order.
pub fn noisy_measurement(
    r_noiseless_linear: f64,
    noise_seed: u64,
    pair_index: u64,
    sigma_n_dbm: f64,
) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, pair_index));
    let sigma = dbm_to_linear(sigma_n_dbm).sqrt();
    let g_re: f64 = rng.sample(StandardNormal);
    let g_im: f64 = rng.sample(StandardNormal);
    let n = Complex64::new(g_re, g_im) * (sigma / 2f64.sqrt());
    (Complex64::new(r_noiseless_linear.sqrt(), 0.0) + n).norm_sqr()
}

/// Noisy realization of a whole table, deterministic in its noise seed.
pub fn noisy_table(table: &RssTable, sigma_n_dbm: f64) -> Vec<f64> {
    (0..table.n_ap * table.n_ut)
        .map(|k| {
            noisy_measurement(
                dbm_to_linear(table.values_dbm[k]),
                table.noise_seed,
                k as u64,
                sigma_n_dbm,
            )
        })
        .collect()
}

/// SNR of a beam pair from its noiseless RSS (both linear).
pub fn snr_of(r_noiseless: f64, sigma_n_sq: f64) -> f64 {
    r_noiseless / sigma_n_sq
}

// ── Ray dump formats ────────────────────────────────────────────────────────

/// One traced (or imported) sample: UT pose plus its path list.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub id: u64,
    pub pose: Pose,
    pub paths: Vec<Path>,
}

const RAYS_CSV_HEADER: &str = "sample_id,ut_x,ut_y,ut_z,ut_alpha,ut_beta,ut_gamma,is_los,\
power_dbm,phase_rad,aod_az,aod_el,aoa_x,aoa_y,aoa_z";

/// Write samples as the fixed-header CSV ray dump (one row per path).
///
/// Samples with an empty path list have no rows in the CSV variant; use the
/// binary format when they must be preserved.
pub fn export_rays_csv<W: Write>(samples: &[RaySample], mut w: W) -> Result<()> {
    writeln!(w, "{RAYS_CSV_HEADER}")?;
    for s in samples {
        for p in &s.paths {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.id,
                s.pose.position.x,
                s.pose.position.y,
                s.pose.position.z,
                s.pose.rotation[0],
                s.pose.rotation[1],
                s.pose.rotation[2],
                u8::from(p.is_los),
                p.power_dbm,
                p.phase_rad,
                p.aod_az,
                p.aod_el,
                p.aoa_dir.x,
                p.aoa_dir.y,
                p.aoa_dir.z,
            )?;
        }
    }
    Ok(())
}

/// Parse a CSV ray dump. Any schema deviation is rejected; malformed
/// records report their line number.
pub fn ingest_rays_csv<R: BufRead>(reader: R, file: &str) -> Result<Vec<RaySample>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::parse(file, 1, "missing header")),
    };
    if header.trim_end() != RAYS_CSV_HEADER {
        return Err(Error::parse(file, 1, "unexpected header fields"));
    }

    let mut samples: Vec<RaySample> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(Error::parse(
                file,
                line_no,
                format!("expected 15 fields, found {}", fields.len()),
            ));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(file, line_no, format!("bad {what} '{s}'")))
        };
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(file, line_no, format!("bad sample_id '{}'", fields[0])))?;
        let pose = Pose::new(
            Vec3::new(
                parse_f64(fields[1], "ut_x")?,
                parse_f64(fields[2], "ut_y")?,
                parse_f64(fields[3], "ut_z")?,
            ),
            [
                parse_f64(fields[4], "ut_alpha")?,
                parse_f64(fields[5], "ut_beta")?,
                parse_f64(fields[6], "ut_gamma")?,
            ],
        );
        let is_los = match fields[7] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(file, line_no, format!("bad is_los '{other}'")));
            }
        };
        let aoa_dir = Vec3::new(
            parse_f64(fields[12], "aoa_x")?,
            parse_f64(fields[13], "aoa_y")?,
            parse_f64(fields[14], "aoa_z")?,
        );
        if (aoa_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::parse(file, line_no, "non-unit AoA direction"));
        }
        let path = Path {
            power_dbm: parse_f64(fields[8], "power_dbm")?,
            phase_rad: parse_f64(fields[9], "phase_rad")?,
            aod_az: parse_f64(fields[10], "aod_az")?,
            aod_el: parse_f64(fields[11], "aod_el")?,
            aoa_dir,
            is_los,
        };
        match samples.last_mut() {
            Some(s) if s.id == id => {
                if s.pose != pose {
                    return Err(Error::parse(
                        file,
                        line_no,
                        "pose differs within one sample_id",
                    ));
                }
                s.paths.push(path);
            }
            _ => samples.push(RaySample {
                id,
                pose,
                paths: vec![path],
            }),
        }
    }
    Ok(samples)
}

const RAYS_MAGIC: &[u8; 5] = b"BRAY1";

/// Write samples in the little-endian binary ray-dump variant.
pub fn export_rays_binary<W: Write>(samples: &[RaySample], mut w: W) -> Result<()> {
    w.write_all(RAYS_MAGIC)?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.id.to_le_bytes())?;
        for v in [
            s.pose.position.x,
            s.pose.position.y,
            s.pose.position.z,
            s.pose.rotation[0],
            s.pose.rotation[1],
            s.pose.rotation[2],
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(s.paths.len() as u32).to_le_bytes())?;
        for p in &s.paths {
            w.write_all(&[u8::from(p.is_los)])?;
            for v in [
                p.power_dbm,
                p.phase_rad,
                p.aod_az,
                p.aod_el,
                p.aoa_dir.x,
                p.aoa_dir.y,
                p.aoa_dir.z,
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read the binary ray-dump variant.
pub fn ingest_rays_binary<R: std::io::Read>(mut r: R) -> Result<Vec<RaySample>> {
    fn read_exact<const N: usize, R: std::io::Read>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn read_f64<R: std::io::Read>(r: &mut R) -> Result<f64> {
        Ok(f64::from_le_bytes(read_exact::<8, _>(r)?))
    }

    let magic = read_exact::<5, _>(&mut r)?;
    if &magic != RAYS_MAGIC {
        return Err(Error::Format("bad magic, expected BRAY1".into()));
    }
    let n = u64::from_le_bytes(read_exact::<8, _>(&mut r)?);
    let mut samples = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let id = u64::from_le_bytes(read_exact::<8, _>(&mut r)?);
        let pose = Pose::new(
            Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?),
            [read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?],
        );
        let n_paths = u32::from_le_bytes(read_exact::<4, _>(&mut r)?);
        let mut paths = Vec::with_capacity(n_paths as usize);
        for _ in 0..n_paths {
            let is_los = read_exact::<1, _>(&mut r)?[0] != 0;
            let power_dbm = read_f64(&mut r)?;
            let phase_rad = read_f64(&mut r)?;
            let aod_az = read_f64(&mut r)?;
            let aod_el = read_f64(&mut r)?;
            let aoa_dir = Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
            if (aoa_dir.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Format("non-unit AoA direction".into()));
            }
            paths.push(Path {
                power_dbm,
                phase_rad,
                aod_az,
                aod_el,
                aoa_dir,
                is_los,
            });
        }
        samples.push(RaySample { id, pose, paths });
    }
    Ok(samples)
}
