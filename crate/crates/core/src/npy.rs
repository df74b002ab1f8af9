//! Reader and writer for the NPY v1.0 array format.
//!
//! Only what exporters of logits and labels actually emit is supported:
//! little-endian `<f4` and `<i8`, C order, 1-D or 2-D.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{Labels, Matrix};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::I64 => "<i8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset of the payload.
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shape viewed as a matrix; 1-D arrays are a single column.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!("rank is validated while parsing"),
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<NpyHeader> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(malformed(path, "bad magic string"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(malformed(
            path,
            format!("version {}.{} (only 1.0 is supported)", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = 10 + header_len;
    if bytes.len() < data_offset {
        return Err(malformed(path, "truncated header"));
    }
    let text = std::str::from_utf8(&bytes[10..data_offset])
        .map_err(|_| malformed(path, "header is not ASCII"))?;

    let descr = dict_value(text, "descr").ok_or_else(|| malformed(path, "missing 'descr'"))?;
    let descr = descr.trim().trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f4" => Dtype::F32,
        "<i8" => Dtype::I64,
        other => {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                descr: other.to_string(),
            })
        }
    };

    let fortran = dict_value(text, "fortran_order")
        .ok_or_else(|| malformed(path, "missing 'fortran_order'"))?;
    match fortran.trim() {
        "False" => {}
        "True" => return Err(malformed(path, "Fortran-ordered arrays are not supported")),
        other => return Err(malformed(path, format!("bad fortran_order {other:?}"))),
    }

    let shape_text =
        dict_value(text, "shape").ok_or_else(|| malformed(path, "missing 'shape'"))?;
    let inner = shape_text
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| malformed(path, format!("bad shape {shape_text:?}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| malformed(path, format!("bad shape {shape_text:?}")))?;
    if shape.is_empty() || shape.len() > 2 {
        return Err(malformed(
            path,
            format!("rank {} (only 1-D and 2-D arrays are supported)", shape.len()),
        ));
    }

    Ok(NpyHeader {
        dtype,
        shape,
        data_offset,
    })
}

/// Raw text of the value stored under `key` in a Python dict literal.
fn dict_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let start = text
        .find(&format!("'{key}'"))
        .or_else(|| text.find(&format!("\"{key}\"")))?;
    let rest = &text[start + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find([',', '}'])?
    };
    Some(&rest[..end])
}

/// Reads only the header of an NPY file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 10];
    file.read_exact(&mut prefix)
        .map_err(|_| malformed(path, "file shorter than the NPY preamble"))?;
    if &prefix[..6] != MAGIC {
        return Err(malformed(path, "bad magic string"));
    }
    let header_len = u16::from_le_bytes([prefix[8], prefix[9]]) as usize;
    let mut bytes = prefix.to_vec();
    bytes.resize(10 + header_len, 0);
    file.read_exact(&mut bytes[10..])
        .map_err(|_| malformed(path, "truncated header"))?;
    parse_header(path, &bytes)
}

enum Payload {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

fn read_payload(path: &Path) -> Result<(NpyHeader, Payload)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let body = &bytes[header.data_offset..];
    let expected = header.element_count() * header.dtype.size();
    if body.len() != expected {
        return Err(malformed(
            path,
            format!("payload is {} bytes, shape needs {expected}", body.len()),
        ));
    }
    let payload = match header.dtype {
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I64 => Payload::I64(
            body.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((header, payload))
}

/// Loads a `<f4` or `<i8` array as a matrix. 1-D arrays load as N×1.
pub fn load_npy(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let (header, payload) = read_payload(path)?;
    let data: Vec<f64> = match payload {
        Payload::F32(v) => {
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    index,
                });
            }
            v.into_iter().map(f64::from).collect()
        }
        Payload::I64(v) => v.into_iter().map(|x| x as f64).collect(),
    };
    let (rows, cols) = header.matrix_shape();
    Matrix::new(rows, cols, data)
}

/// Loads an `<i8` label vector (1-D, or N×1).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Labels> {
    let path = path.as_ref();
    let (header, payload) = read_payload(path)?;
    let (_, cols) = header.matrix_shape();
    if cols != 1 {
        return Err(malformed(
            path,
            format!("labels must be 1-D, got shape {:?}", header.shape),
        ));
    }
    let Payload::I64(values) = payload else {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            descr: header.dtype.descr().to_string(),
        });
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            usize::try_from(v).map_err(|_| {
                Error::ShapeMismatch(format!("{}: negative label {v} at {i}", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Labels)
}

fn encode_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let shape_text = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape_text}, }}",
        dtype.descr()
    );
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', padding));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a matrix as a 2-D `<f4` array.
pub fn save_npy(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = encode_header(Dtype::F32, &[m.rows(), m.cols()]);
    bytes.reserve(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_all(path.as_ref(), &bytes)
}

/// Writes labels as a 1-D `<i8` array.
pub fn save_labels(labels: &Labels, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = encode_header(Dtype::I64, &[labels.len()]);
    for &v in labels.as_slice() {
        bytes.extend_from_slice(&(v as i64).to_le_bytes());
    }
    write_all(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_file(dir: &Path, name: &str, header: &str, payload: &[u8]) -> std::path::PathBuf {
        let mut dict = header.to_string();
        while !(10 + dict.len() + 1).is_multiple_of(64) {
            dict.push(' ');
        }
        dict.push('\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.extend_from_slice(payload);
        let path = dir.join(name);
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn loads_small_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = [1f32, 2., 3., 4.].iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = raw_file(
            dir.path(),
            "a.npy",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }",
            &payload,
        );
        let m = load_npy(path).unwrap();
        assert_eq!(m, Matrix::new(2, 2, vec![1., 2., 3., 4.]).unwrap());
    }

    #[test]
    fn rejects_f8() {
        let dir = tempfile::tempdir().unwrap();
        let path = raw_file(
            dir.path(),
            "a.npy",
            "{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }",
            &1f64.to_le_bytes(),
        );
        assert!(matches!(load_npy(path), Err(Error::UnsupportedDtype { .. })));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.npy");
        fs::write(&p, b"not an npy file at all").unwrap();
        assert!(matches!(load_npy(&p), Err(Error::MalformedHeader { .. })));

        let good = dir.path().join("good.npy");
        save_npy(&Matrix::zeros(1, 1), &good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes[6] = 2;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_npy(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = [1f32, f32::NAN].iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = raw_file(
            dir.path(),
            "a.npy",
            "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2), }",
            &payload,
        );
        assert!(matches!(
            load_npy(path),
            Err(Error::NonFiniteValue { index: 1, .. })
        ));
    }

    #[test]
    fn one_d_loads_as_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.npy");
        save_labels(&Labels(vec![3, 1, 2]), &p).unwrap();
        let m = load_npy(&p).unwrap();
        assert_eq!(m.shape(), (3, 1));
        assert_eq!(load_labels(&p).unwrap(), Labels(vec![3, 1, 2]));
    }

    #[test]
    fn minimal_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.npy");
        save_npy(&Matrix::zeros(1, 1), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 128 + 4);
        assert_eq!(read_header(&p).unwrap().data_offset, 128);
        assert_eq!(&bytes[128..], &0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_3x7() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.npy");
        let m = Matrix::new(3, 7, (0..21).map(|i| i as f64 * 0.25 - 2.0).collect()).unwrap();
        save_npy(&m, &p).unwrap();
        assert_eq!(load_npy(&p).unwrap(), m);
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("m.npy");
        assert!(matches!(
            save_npy(&Matrix::zeros(1, 1), p),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn f32_round_trip_is_bit_exact(
            rows in 1usize..100,
            cols in 1usize..100,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..rows * cols)
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0xBFFF_FFFF))
                .collect();
            let m = Matrix::new(rows, cols, values.iter().map(|&v| v as f64).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.npy");
            save_npy(&m, &p).unwrap();
            let back = load_npy(&p).unwrap();
            let bits: Vec<u32> = back.as_slice().iter().map(|&v| (v as f32).to_bits()).collect();
            let expected: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, expected);
        }

        #[test]
        fn i64_labels_round_trip(values in proptest::collection::vec(0usize..1_000_000, 1..10_000)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("y.npy");
            let labels = Labels(values);
            save_labels(&labels, &p).unwrap();
            prop_assert_eq!(load_labels(&p).unwrap(), labels);
        }
    }
}
