//! Named-tensor fragments used inside checkpoint files.
//!
//! Layout of one fragment, all integers little-endian:
//!
//! ```text
//! u64 name_len | name (UTF-8, name_len bytes) | u64 rank | rank × u64 extent | n × f64 value
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_fragment(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads one fragment starting at `*offset` and advances it.
///
/// Errors carry the absolute byte offset at which decoding failed.
pub fn read_fragment(buf: &[u8], offset: &mut usize) -> Result<(String, Tensor)> {
    let name_len = read_u64(buf, offset)? as usize;
    let name_at = *offset;
    let name_bytes = take(buf, offset, name_len)?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|e| Error::Fragment {
            offset: name_at,
            reason: format!("tensor name is not UTF-8: {e}"),
        })?
        .to_owned();
    let rank_at = *offset;
    let rank = read_u64(buf, offset)? as usize;
    if rank > 16 {
        return Err(Error::Fragment {
            offset: rank_at,
            reason: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(buf, offset)? as usize);
    }
    let data_at = *offset;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len().saturating_sub(data_at)))
        .ok_or_else(|| Error::Fragment {
            offset: data_at,
            reason: format!("data for shape {shape:?} runs past end of input"),
        })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let bytes = take(buf, offset, 8)?;
        data.push(f64::from_le_bytes(bytes.try_into().expect("8 bytes")));
    }
    let t = Tensor::new(shape, data).map_err(|e| Error::Fragment {
        offset: data_at,
        reason: e.to_string(),
    })?;
    Ok((name, t))
}

/// Decodes fragments until the buffer is exhausted.
pub fn read_all_fragments(buf: &[u8], mut offset: usize) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while offset < buf.len() {
        out.push(read_fragment(buf, &mut offset)?);
    }
    Ok(out)
}

fn take<'a>(buf: &'a [u8], offset: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = offset.checked_add(n).filter(|&e| e <= buf.len()).ok_or(Error::Fragment {
        offset: *offset,
        reason: format!("need {n} bytes, {} remain", buf.len().saturating_sub(*offset)),
    })?;
    let s = &buf[*offset..end];
    *offset = end;
    Ok(s)
}

fn read_u64(buf: &[u8], offset: &mut usize) -> Result<u64> {
    let b = take(buf, offset, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        write_fragment(&mut buf, "w", &Tensor::vector(vec![1.5]));
        let mut expected = Vec::new();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_input_reports_offset() {
        let mut buf = Vec::new();
        write_fragment(&mut buf, "abc", &Tensor::zeros(&[2, 2]));
        buf.truncate(buf.len() - 3);
        let err = read_all_fragments(&buf, 0).unwrap_err();
        match err {
            Error::Fragment { offset, .. } => assert_eq!(offset, 8 + 3 + 8 + 16),
            other => panic!("unexpected {other:?}"),
        }
    }
}
