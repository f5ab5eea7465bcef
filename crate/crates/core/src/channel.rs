//! Rician link synthesis and the stacked channel matrices.
//!
//! Layout of the stacked matrices (`N = R * N_s`, `M = L * N_t`):
//!
//! - `direct`:   `K x M`, row `k` is `d_k^H`, AP-major columns.
//! - `ap_ris`:   `N x M`, block `(r, l)` is the `N_s x N_t` link `G_{l,r}`.
//! - `ris_user`: `K x N`, row `k` is `f_k^H`, RIS-major columns.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::RisState;
use crate::scenario::{NetworkGeometry, Point, SystemConfig};
use crate::{CMatrix, CVector, Complex64, RandomSource};

/// Carrier wavelength used for the line-of-sight propagation phase, meters.
pub const WAVELENGTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGain {
    pub value: f64,
    /// Distance was below the reference distance and got clamped.
    pub clamped: bool,
}

/// Distance path gain `C0 * (d / d0)^-alpha` in linear scale.
pub fn path_gain(distance: f64, exponent: f64, cfg: &SystemConfig) -> PathGain {
    let clamped = distance < cfg.ref_distance;
    if clamped {
        log::warn!(
            "link distance {distance:.3} m below reference distance {} m, clamping",
            cfg.ref_distance
        );
    }
    let d = distance.max(cfg.ref_distance);
    PathGain {
        value: cfg.ref_gain * (d / cfg.ref_distance).powf(-exponent),
        clamped,
    }
}

/// Geometry of the line-of-sight component of one link.
///
/// Both endpoints carry uniform linear arrays with half-wavelength spacing
/// along the x axis; the steering phase of element `m` is `pi * m * cos`,
/// where `cos` is the direction cosine towards the other endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosSpec {
    pub rx_cos: f64,
    pub tx_cos: f64,
    pub distance: f64,
}

impl LosSpec {
    pub fn between(tx: &Point, rx: &Point) -> Self {
        let d = tx.distance(rx);
        let (tx_cos, rx_cos) = if d > 0.0 {
            ((rx.x - tx.x) / d, (tx.x - rx.x) / d)
        } else {
            (0.0, 0.0)
        };
        Self {
            rx_cos,
            tx_cos,
            distance: d,
        }
    }
}

fn steering(len: usize, cos: f64) -> CVector {
    CVector::from_fn(len, |m, _| Complex64::from_polar(1.0, PI * m as f64 * cos))
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * FRAC_1_SQRT_2
}

/// One Rician-faded `dim_rx x dim_tx` link with average entry power `gain`.
pub fn rician_link<R: Rng + ?Sized>(
    dim_rx: usize,
    dim_tx: usize,
    gain: f64,
    beta: f64,
    rng: &mut R,
    los: &LosSpec,
) -> CMatrix {
    let los_weight = (beta / (1.0 + beta)).sqrt();
    let nlos_weight = (1.0 / (1.0 + beta)).sqrt();
    let phase = Complex64::from_polar(1.0, -2.0 * PI * los.distance / WAVELENGTH);
    let a_rx = steering(dim_rx, los.rx_cos);
    let a_tx = steering(dim_tx, los.tx_cos);
    let scale = gain.sqrt();
    CMatrix::from_fn(dim_rx, dim_tx, |i, j| {
        let los_entry = a_rx[i] * a_tx[j].conj() * phase;
        let nlos_entry = complex_gaussian(rng);
        (los_entry * los_weight + nlos_entry * nlos_weight) * scale
    })
}

/// Identifies one physical link; each link draws from its own RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkId {
    ApUser { ap: usize, user: usize },
    ApRis { ap: usize, ris: usize },
    RisUser { ris: usize, user: usize },
}

impl LinkId {
    fn stream(&self) -> u64 {
        let (kind, a, b) = match *self {
            LinkId::ApUser { ap, user } => (0u64, ap, user),
            LinkId::ApRis { ap, ris } => (1, ap, ris),
            LinkId::RisUser { ris, user } => (2, ris, user),
        };
        (kind << 60) | ((a as u64 & 0x3fff_ffff) << 30) | (b as u64 & 0x3fff_ffff)
    }
}

/// Independent RNG for one link, derived from the realization seed.
pub fn link_rng(base_seed: u64, link: LinkId) -> RandomSource {
    let mut rng = RandomSource::seed_from_u64(base_seed);
    rng.set_stream(link.stream());
    rng
}

/// Draws the matrix of a single link exactly as [`synthesize_channels`] does.
pub fn link_channel(
    cfg: &SystemConfig,
    geometry: &NetworkGeometry,
    base_seed: u64,
    link: LinkId,
) -> CMatrix {
    let (tx, rx, dim_rx, dim_tx, exponent) = match link {
        LinkId::ApUser { ap, user } => (
            geometry.ap_positions[ap],
            geometry.user_positions[user],
            1,
            cfg.antennas_per_ap,
            cfg.pl_exp_direct,
        ),
        LinkId::ApRis { ap, ris } => (
            geometry.ap_positions[ap],
            geometry.ris_positions[ris],
            cfg.elements_per_ris,
            cfg.antennas_per_ap,
            cfg.pl_exp_ap_ris,
        ),
        LinkId::RisUser { ris, user } => (
            geometry.ris_positions[ris],
            geometry.user_positions[user],
            1,
            cfg.elements_per_ris,
            cfg.pl_exp_ris_user,
        ),
    };
    let los = LosSpec::between(&tx, &rx);
    let gain = path_gain(los.distance, exponent, cfg).value;
    let mut rng = link_rng(base_seed, link);
    rician_link(dim_rx, dim_tx, gain, cfg.rician_factor, &mut rng, &los)
}

/// Direct, AP-RIS and RIS-user channels of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub num_aps: usize,
    pub antennas_per_ap: usize,
    pub num_ris: usize,
    pub elements_per_ris: usize,
    pub num_users: usize,
    pub direct: CMatrix,
    pub ap_ris: CMatrix,
    pub ris_user: CMatrix,
}

impl ChannelSet {
    pub fn total_antennas(&self) -> usize {
        self.num_aps * self.antennas_per_ap
    }

    pub fn total_elements(&self) -> usize {
        self.num_ris * self.elements_per_ris
    }

    /// Rows of `ap_ris` belonging to RIS `r` (`G_r`, `N_s x L N_t`).
    pub fn ris_rows(&self, r: usize) -> nalgebra::DMatrixView<'_, Complex64> {
        self.ap_ris.rows(r * self.elements_per_ris, self.elements_per_ris)
    }

    pub fn is_finite(&self) -> bool {
        [&self.direct, &self.ap_ris, &self.ris_user]
            .iter()
            .all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

/// Draws every link of the network and stacks them into a [`ChannelSet`].
///
/// A single `u64` is consumed from `rng`; every link then uses its own stream
/// (see [`link_rng`]), so individual blocks can be regenerated in isolation.
pub fn synthesize_channels<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    geometry: &NetworkGeometry,
    rng: &mut R,
) -> ChannelSet {
    synthesize_channels_from_seed(cfg, geometry, rng.random())
}

pub fn synthesize_channels_from_seed(
    cfg: &SystemConfig,
    geometry: &NetworkGeometry,
    base_seed: u64,
) -> ChannelSet {
    let (l_count, nt) = (geometry.ap_positions.len(), cfg.antennas_per_ap);
    let (r_count, ns) = (geometry.ris_positions.len(), cfg.elements_per_ris);
    let k_count = geometry.user_positions.len();
    let mut direct = CMatrix::zeros(k_count, l_count * nt);
    let mut ap_ris = CMatrix::zeros(r_count * ns, l_count * nt);
    let mut ris_user = CMatrix::zeros(k_count, r_count * ns);
    for l in 0..l_count {
        for k in 0..k_count {
            let link = link_channel(cfg, geometry, base_seed, LinkId::ApUser { ap: l, user: k });
            direct.view_mut((k, l * nt), (1, nt)).copy_from(&link);
        }
        for r in 0..r_count {
            let link = link_channel(cfg, geometry, base_seed, LinkId::ApRis { ap: l, ris: r });
            ap_ris.view_mut((r * ns, l * nt), (ns, nt)).copy_from(&link);
        }
    }
    for r in 0..r_count {
        for k in 0..k_count {
            let link = link_channel(cfg, geometry, base_seed, LinkId::RisUser { ris: r, user: k });
            ris_user.view_mut((k, r * ns), (1, ns)).copy_from(&link);
        }
    }
    ChannelSet {
        num_aps: l_count,
        antennas_per_ap: nt,
        num_ris: r_count,
        elements_per_ris: ns,
        num_users: k_count,
        direct,
        ap_ris,
        ris_user,
    }
}

/// Entries of the row vector `h_k^H = d_k^H + theta^H diag(f_k^H) G` for the
/// physical coefficients `coeffs` (`theta = conj(coeffs)`).
///
/// The returned vector holds the row itself, so `h_k^H w = row.transpose() * w`.
pub fn effective_channel_from_coeffs(ch: &ChannelSet, coeffs: &CVector, k: usize) -> CVector {
    let mut row: CVector = ch.direct.row(k).transpose();
    if ch.total_elements() > 0 {
        let weights = CVector::from_fn(ch.total_elements(), |n, _| coeffs[n] * ch.ris_user[(k, n)]);
        row += ch.ap_ris.tr_mul(&weights);
    }
    row
}

pub fn effective_channel(ch: &ChannelSet, ris: &RisState, k: usize) -> CVector {
    effective_channel_from_coeffs(ch, &ris.coeffs, k)
}

/// All effective channel rows, one per user.
pub fn effective_channels(ch: &ChannelSet, ris: &RisState) -> Vec<CVector> {
    (0..ch.num_users).map(|k| effective_channel(ch, ris, k)).collect()
}

#[derive(Debug, Error)]
pub enum ChannelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed channel document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("inconsistent channel document: {0}")]
    Shape(String),
}

/// JSON document format for [`ChannelSet`] fixtures, version `cellfree-ris/channels/1`.
#[derive(Debug, Serialize, Deserialize)]
struct ChannelDocument {
    format: String,
    num_aps: usize,
    antennas_per_ap: usize,
    num_ris: usize,
    elements_per_ris: usize,
    num_users: usize,
    direct: MatrixDocument,
    ap_ris: MatrixDocument,
    ris_user: MatrixDocument,
}

/// Row-major real and imaginary parts.
#[derive(Debug, Serialize, Deserialize)]
struct MatrixDocument {
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

const CHANNEL_FORMAT: &str = "cellfree-ris/channels/1";

impl MatrixDocument {
    fn from_matrix(m: &CMatrix) -> Self {
        let mut re = Vec::with_capacity(m.len());
        let mut im = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            re,
            im,
        }
    }

    fn to_matrix(&self, name: &str) -> Result<CMatrix, ChannelIoError> {
        let n = self.rows * self.cols;
        if self.re.len() != n || self.im.len() != n {
            return Err(ChannelIoError::Shape(format!(
                "{name}: expected {n} entries for {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(CMatrix::from_fn(self.rows, self.cols, |i, j| {
            let idx = i * self.cols + j;
            Complex64::new(self.re[idx], self.im[idx])
        }))
    }
}

pub fn dump_channels<W: Write>(ch: &ChannelSet, out: W) -> Result<(), ChannelIoError> {
    let doc = ChannelDocument {
        format: CHANNEL_FORMAT.to_string(),
        num_aps: ch.num_aps,
        antennas_per_ap: ch.antennas_per_ap,
        num_ris: ch.num_ris,
        elements_per_ris: ch.elements_per_ris,
        num_users: ch.num_users,
        direct: MatrixDocument::from_matrix(&ch.direct),
        ap_ris: MatrixDocument::from_matrix(&ch.ap_ris),
        ris_user: MatrixDocument::from_matrix(&ch.ris_user),
    };
    serde_json::to_writer(out, &doc)?;
    Ok(())
}

pub fn load_channels<R: Read>(input: R) -> Result<ChannelSet, ChannelIoError> {
    let doc: ChannelDocument = serde_json::from_reader(input)?;
    if doc.format != CHANNEL_FORMAT {
        return Err(ChannelIoError::Shape(format!("unknown format tag {}", doc.format)));
    }
    let m = doc.num_aps * doc.antennas_per_ap;
    let n = doc.num_ris * doc.elements_per_ris;
    let k = doc.num_users;
    let ch = ChannelSet {
        num_aps: doc.num_aps,
        antennas_per_ap: doc.antennas_per_ap,
        num_ris: doc.num_ris,
        elements_per_ris: doc.elements_per_ris,
        num_users: k,
        direct: doc.direct.to_matrix("direct")?,
        ap_ris: doc.ap_ris.to_matrix("ap_ris")?,
        ris_user: doc.ris_user.to_matrix("ris_user")?,
    };
    let shapes = [
        (ch.direct.shape(), (k, m)),
        (ch.ap_ris.shape(), (n, m)),
        (ch.ris_user.shape(), (k, n)),
    ];
    for (got, want) in shapes {
        if got != want {
            return Err(ChannelIoError::Shape(format!("matrix shape {got:?}, expected {want:?}")));
        }
    }
    Ok(ch)
}
