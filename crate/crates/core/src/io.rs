//! On-disk formats.
//!
//! Matrices use a small container: the line `HBUM1`, a one-line JSON header
//! (`rows`, `cols`, `dtype`, `order`), the row-major little-endian payload, and
//! a 32-byte SHA-256 of everything before it. Label fields are stored as
//! `height x width` `u32` matrices holding 1-based labels. Everything else is
//! pretty-printed JSON.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{AbundanceMatrix, EndmemberMatrix, LabelField, ObservationMatrix, SupervisionData};
use crate::sampler::{Estimates, Trace};
use crate::synthgen::{GeneratedScene, Scene, SceneSpec};

pub const MAGIC: &[u8] = b"HBUM1\n";
const FOOTER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    rows: usize,
    cols: usize,
    dtype: Dtype,
    order: String,
}

const ROW_MAJOR: &str = "row-major";

fn frame(rows: usize, cols: usize, dtype: Dtype, payload: Vec<u8>) -> Vec<u8> {
    let header = Header {
        rows,
        cols,
        dtype,
        order: ROW_MAJOR.into(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Encode an `f64` matrix.
pub fn encode_f64(m: &DMatrix<f64>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            payload.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    frame(m.nrows(), m.ncols(), Dtype::F64, payload)
}

/// Encode a `u32` matrix.
pub fn encode_u32(m: &DMatrix<u32>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(m.len() * 4);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            payload.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    frame(m.nrows(), m.ncols(), Dtype::U32, payload)
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn split_frame<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    if bytes.len() < MAGIC.len() + FOOTER_LEN || !bytes.starts_with(MAGIC) {
        return Err(format_err(path, "not an HBUM1 matrix file"));
    }
    let (body, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
    if Sha256::digest(body).as_slice() != footer {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let rest = &body[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.order != ROW_MAJOR {
        return Err(format_err(path, format!("unsupported order {:?}", header.order)));
    }
    let payload = &rest[nl + 1..];
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(header.dtype.width()))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok((header, payload))
}

/// Decode an `f64` matrix; `path` only labels errors.
pub fn decode_f64(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let (h, payload) = split_frame(bytes, path)?;
    if h.dtype != Dtype::F64 {
        return Err(format_err(path, format!("expected dtype f64, found {:?}", h.dtype)));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(DMatrix::from_row_iterator(h.rows, h.cols, values))
}

/// Decode a `u32` matrix; `path` only labels errors.
pub fn decode_u32(bytes: &[u8], path: &Path) -> Result<DMatrix<u32>> {
    let (h, payload) = split_frame(bytes, path)?;
    if h.dtype != Dtype::U32 {
        return Err(format_err(path, format!("expected dtype u32, found {:?}", h.dtype)));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    Ok(DMatrix::from_row_iterator(h.rows, h.cols, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_bytes(path, &encode_f64(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_f64(&read_bytes(path)?, path)
}

pub fn write_u32_matrix(path: &Path, m: &DMatrix<u32>) -> Result<()> {
    write_bytes(path, &encode_u32(m))
}

pub fn read_u32_matrix(path: &Path) -> Result<DMatrix<u32>> {
    decode_u32(&read_bytes(path)?, path)
}

/// Labels as a `height x width` matrix of 1-based values.
pub fn labels_to_matrix(field: &LabelField) -> DMatrix<u32> {
    let lat = field.lattice();
    DMatrix::from_row_iterator(lat.height(), lat.width(), field.labels().iter().map(|&l| l + 1))
}

pub fn write_labels(path: &Path, field: &LabelField) -> Result<()> {
    write_u32_matrix(path, &labels_to_matrix(field))
}

/// Read a label file holding values in `1..=domain_size`.
pub fn read_labels(path: &Path, domain_size: usize) -> Result<LabelField> {
    let m = read_u32_matrix(path)?;
    let lat = Lattice::new(m.nrows(), m.ncols()).map_err(|e| format_err(path, e.to_string()))?;
    let mut labels = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v == 0 || v as usize > domain_size {
                return Err(format_err(
                    path,
                    format!("label {v} at ({}, {}) outside 1..={domain_size}", i + 1, j + 1),
                ));
            }
            labels.push(v - 1);
        }
    }
    LabelField::new(labels, domain_size, lat)
}

/// Parse a JSON file; errors name the file and the line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Training labels as stored on disk (1-based classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionFile {
    pub num_pixels: usize,
    pub num_classes: usize,
    /// 0-based raster indices of the training pixels.
    pub labeled: Vec<usize>,
    /// 1-based class of each training pixel.
    pub labels: Vec<u32>,
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
}

impl From<&SupervisionData> for SupervisionFile {
    fn from(s: &SupervisionData) -> Self {
        Self {
            num_pixels: s.num_pixels(),
            num_classes: s.num_classes(),
            labeled: s.labeled().to_vec(),
            labels: s.labels().iter().map(|&c| c + 1).collect(),
            eta: s.eta().to_vec(),
            pi: s.pi().to_vec(),
        }
    }
}

impl SupervisionFile {
    pub fn into_supervision(self) -> Result<SupervisionData> {
        if self.labels.contains(&0) {
            return Err(Error::config("training labels are 1-based; found 0"));
        }
        let labels = self.labels.iter().map(|&c| c - 1).collect();
        SupervisionData::new(self.num_pixels, self.num_classes, self.labeled, labels, self.eta)?.with_pi(self.pi)
    }
}

pub fn write_supervision(path: &Path, sup: &SupervisionData) -> Result<()> {
    write_json(path, &SupervisionFile::from(sup))
}

pub fn read_supervision(path: &Path) -> Result<SupervisionData> {
    let file: SupervisionFile = read_json(path)?;
    file.into_supervision().map_err(|e| format_err(path, e.to_string()))
}

/// File names inside a scene bundle directory.
pub mod bundle {
    pub const SPEC: &str = "scene.json";
    pub const Y: &str = "Y.hbum";
    pub const M: &str = "M.hbum";
    pub const A_TRUE: &str = "A_true.hbum";
    pub const Z_TRUE: &str = "z_true.hbum";
    pub const OMEGA_TRUE: &str = "omega_true.hbum";
    pub const S2_TRUE: &str = "s2_true.hbum";
    pub const SUPERVISION: &str = "supervision.json";
    pub const MANIFEST: &str = "manifest.json";

    pub const FILES: [&str; 8] = [SPEC, Y, M, A_TRUE, Z_TRUE, OMEGA_TRUE, S2_TRUE, SUPERVISION];
}

/// File names inside a results directory.
pub mod results {
    pub const A_HAT: &str = "A_hat.hbum";
    pub const S2_HAT: &str = "s2_hat.hbum";
    pub const PSI_HAT: &str = "psi_hat.hbum";
    pub const SIGMA2_HAT: &str = "sigma2_hat.hbum";
    pub const Q_HAT: &str = "Q_hat.hbum";
    pub const Z_HAT: &str = "z_hat.hbum";
    pub const OMEGA_HAT: &str = "omega_hat.hbum";
    pub const OMEGA_FREQ: &str = "omega_freq.hbum";
    pub const S2_TRACE: &str = "s2_trace.hbum";
    pub const MANIFEST: &str = "manifest.json";

    pub const FILES: [&str; 9] = [
        A_HAT, S2_HAT, PSI_HAT, SIGMA2_HAT, Q_HAT, Z_HAT, OMEGA_HAT, OMEGA_FREQ, S2_TRACE,
    ];
}

fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Write every file of a scene bundle except the manifest.
pub fn write_bundle(dir: &Path, spec: &SceneSpec, g: &GeneratedScene) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let p = |name: &str| dir.join(name);
    write_json(&p(bundle::SPEC), spec)?;
    write_matrix(&p(bundle::Y), g.scene.observations.data())?;
    write_matrix(&p(bundle::M), g.endmembers.data())?;
    write_matrix(&p(bundle::A_TRUE), g.scene.abundances.data())?;
    write_labels(&p(bundle::Z_TRUE), &g.scene.clusters)?;
    write_labels(&p(bundle::OMEGA_TRUE), &g.scene.classes)?;
    write_matrix(&p(bundle::S2_TRUE), &scalar(g.scene.noise_variance))?;
    write_supervision(&p(bundle::SUPERVISION), &g.supervision)?;
    Ok(bundle::FILES.iter().map(|f| p(f)).collect())
}

fn check_shape(path: &Path, m: &DMatrix<f64>, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(format_err(
            path,
            format!("expected shape {shape:?}, found {:?}", m.shape()),
        ));
    }
    Ok(())
}

fn check_lattice(path: &Path, field: &LabelField, lat: &Lattice) -> Result<()> {
    if field.lattice() != lat {
        return Err(format_err(
            path,
            format!("expected a {} x {} label map", lat.height(), lat.width()),
        ));
    }
    Ok(())
}

/// Read a bundle written by [`write_bundle`], checking every shape against
/// the scene description.
pub fn read_bundle(dir: &Path) -> Result<(SceneSpec, GeneratedScene)> {
    let p = |name: &str| dir.join(name);
    let spec: SceneSpec = read_json(&p(bundle::SPEC))?;
    spec.validate()
        .map_err(|e| format_err(&p(bundle::SPEC), e.to_string()))?;
    let lat = spec.lattice()?;
    let n = lat.len();

    let y = read_matrix(&p(bundle::Y))?;
    check_shape(&p(bundle::Y), &y, (spec.bands, n))?;
    let m = read_matrix(&p(bundle::M))?;
    check_shape(&p(bundle::M), &m, (spec.bands, spec.r))?;
    let a = read_matrix(&p(bundle::A_TRUE))?;
    check_shape(&p(bundle::A_TRUE), &a, (spec.r, n))?;
    let z = read_labels(&p(bundle::Z_TRUE), spec.k)?;
    check_lattice(&p(bundle::Z_TRUE), &z, &lat)?;
    let omega = read_labels(&p(bundle::OMEGA_TRUE), spec.j)?;
    check_lattice(&p(bundle::OMEGA_TRUE), &omega, &lat)?;
    let s2 = read_matrix(&p(bundle::S2_TRUE))?;
    check_shape(&p(bundle::S2_TRUE), &s2, (1, 1))?;
    let supervision = read_supervision(&p(bundle::SUPERVISION))?;
    if supervision.num_pixels() != n || supervision.num_classes() != spec.j {
        return Err(format_err(
            &p(bundle::SUPERVISION),
            "does not match the scene dimensions",
        ));
    }

    let scene = Scene {
        observations: ObservationMatrix::new(y, lat)?,
        abundances: AbundanceMatrix::new(a)?,
        clusters: z,
        classes: omega,
        noise_variance: s2[(0, 0)],
    };
    let endmembers = EndmemberMatrix::new(m).map_err(|e| format_err(&p(bundle::M), e.to_string()))?;
    Ok((
        spec,
        GeneratedScene {
            endmembers,
            scene,
            supervision,
        },
    ))
}

/// Write the estimates and the recorded noise variances.
pub fn write_results(dir: &Path, est: &Estimates, trace: &Trace) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let p = |name: &str| dir.join(name);
    write_matrix(&p(results::A_HAT), est.abundances.data())?;
    write_matrix(&p(results::S2_HAT), &scalar(est.s2))?;
    write_matrix(&p(results::PSI_HAT), &est.psi)?;
    write_matrix(&p(results::SIGMA2_HAT), &est.sigma2)?;
    write_matrix(&p(results::Q_HAT), &est.q)?;
    write_labels(&p(results::Z_HAT), &est.z)?;
    write_labels(&p(results::OMEGA_HAT), &est.omega)?;
    write_matrix(&p(results::OMEGA_FREQ), &est.omega_freq)?;
    write_matrix(
        &p(results::S2_TRACE),
        &DMatrix::from_column_slice(trace.s2_samples.len(), 1, &trace.s2_samples),
    )?;
    Ok(results::FILES.iter().map(|f| p(f)).collect())
}

/// Read results written by [`write_results`]. Cluster, class and endmember
/// counts are taken from the interaction and abundance matrices.
pub fn read_results(dir: &Path) -> Result<Estimates> {
    let p = |name: &str| dir.join(name);
    let q = read_matrix(&p(results::Q_HAT))?;
    let (k, j) = q.shape();
    let z = read_labels(&p(results::Z_HAT), k)?;
    let lat = *z.lattice();
    let n = lat.len();
    let omega = read_labels(&p(results::OMEGA_HAT), j)?;
    check_lattice(&p(results::OMEGA_HAT), &omega, &lat)?;
    let a = read_matrix(&p(results::A_HAT))?;
    let r = a.nrows();
    check_shape(&p(results::A_HAT), &a, (r, n))?;
    let s2 = read_matrix(&p(results::S2_HAT))?;
    check_shape(&p(results::S2_HAT), &s2, (1, 1))?;
    let psi = read_matrix(&p(results::PSI_HAT))?;
    check_shape(&p(results::PSI_HAT), &psi, (k, r))?;
    let sigma2 = read_matrix(&p(results::SIGMA2_HAT))?;
    check_shape(&p(results::SIGMA2_HAT), &sigma2, (k, r))?;
    let omega_freq = read_matrix(&p(results::OMEGA_FREQ))?;
    check_shape(&p(results::OMEGA_FREQ), &omega_freq, (j, n))?;
    Ok(Estimates {
        abundances: AbundanceMatrix::new(a)?,
        s2: s2[(0, 0)],
        psi,
        sigma2,
        q,
        z,
        omega,
        omega_freq,
    })
}

/// Hex SHA-256 of the encoded observation matrix; ties results to a scene.
pub fn scene_id(observations: &ObservationMatrix) -> String {
    hex::encode(Sha256::digest(encode_f64(observations.data())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode_f64(&m);
        assert!(bytes.starts_with(b"HBUM1\n{\"rows\":2,\"cols\":3,\"dtype\":\"f64\",\"order\":\"row-major\"}\n"));
        let payload_start = bytes.len() - FOOTER_LEN - 6 * 8;
        // row-major: second value is m[(0, 1)]
        assert_eq!(&bytes[payload_start + 8..payload_start + 16], &2.0f64.to_le_bytes());
        assert_eq!(decode_f64(&bytes, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let m = DMatrix::from_element(3, 3, 0.5);
        let mut bytes = encode_f64(&m);
        let i = bytes.len() - FOOTER_LEN - 3;
        bytes[i] ^= 1;
        assert!(matches!(
            decode_f64(&bytes, Path::new("m")),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            decode_f64(b"garbage", Path::new("m")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn dtype_mismatch() {
        let m = DMatrix::from_element(2, 2, 7u32);
        assert!(decode_f64(&encode_u32(&m), Path::new("m")).is_err());
        assert_eq!(decode_u32(&encode_u32(&m), Path::new("m")).unwrap(), m);
    }

    #[test]
    fn labels_are_one_based_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.hbum");
        let lat = Lattice::new(2, 3).unwrap();
        let field = LabelField::new(vec![0, 1, 2, 2, 1, 0], 3, lat).unwrap();
        write_labels(&path, &field).unwrap();
        let raw = read_u32_matrix(&path).unwrap();
        assert_eq!(raw.shape(), (2, 3));
        assert_eq!(raw[(0, 0)], 1);
        assert_eq!(raw[(1, 0)], 3);
        assert_eq!(read_labels(&path, 3).unwrap(), field);
        assert!(read_labels(&path, 2).is_err());
    }

    #[test]
    fn supervision_round_trip() {
        let sup = SupervisionData::new(10, 2, vec![0, 3, 4], vec![0, 1, 1], vec![0.9, 0.95, 0.6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        write_supervision(&path, &sup).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"labels\": [\n    1,\n    2,\n    2\n  ]"));
        assert_eq!(read_supervision(&path).unwrap(), sup);
    }

    #[test]
    fn json_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "{\n  \"k\": 3,\n  \"bogus\": 1\n}").unwrap();
        let err = read_json::<crate::model::ModelConfig>(&path).unwrap_err().to_string();
        assert!(err.contains("c.json"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let m = DMatrix::from_fn(rows, cols, |_, _| {
                x = crate::distributions::splitmix64(x);
                f64::from_bits(x)
            });
            let back = decode_f64(&encode_f64(&m), Path::new("m")).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn u32_round_trip(v in proptest::collection::vec(any::<u32>(), 0..40), cols in 1usize..5) {
            let rows = v.len() / cols;
            let m = DMatrix::from_row_slice(rows, cols, &v[..rows * cols]);
            prop_assert_eq!(decode_u32(&encode_u32(&m), Path::new("m")).unwrap(), m);
        }
    }
}
