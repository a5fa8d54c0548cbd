//! Chunked n-dimensional tensor files with region reads.
//!
//! Layout: magic `DFNO`, format version (u16 LE), dtype code (u8), ndim
//! (u8), dims (u64 LE each), chunk shape (u64 LE each), then the chunks in
//! row-major chunk-grid order. Each chunk holds raw little-endian scalars,
//! row-major, with edge chunks truncated to the tensor bounds, so the total
//! byte length is exactly computable from the header. Region reads touch
//! only the chunks intersecting the region.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::{IndexRange, RegionBox};
use crate::tensor::{copy_region, extract_region, volume, Scalar};

const MAGIC: &[u8; 4] = b"DFNO";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: crate::tensor::Dtype,
    pub dims: Vec<usize>,
    pub chunk_shape: Vec<usize>,
}

impl Header {
    fn byte_len(&self) -> usize {
        4 + 2 + 1 + 1 + 16 * self.dims.len()
    }

    /// Total file size implied by the header.
    pub fn expected_file_len(&self) -> usize {
        let mut total = self.byte_len();
        for_each_chunk(&self.dims, &self.chunk_shape, |chunk_box| {
            total += chunk_box.volume() * self.dtype.byte_width();
        });
        total
    }
}

/// Visit every chunk's region in row-major chunk-grid order.
fn for_each_chunk(dims: &[usize], chunk_shape: &[usize], mut f: impl FnMut(&RegionBox)) {
    let counts: Vec<usize> = dims
        .iter()
        .zip(chunk_shape)
        .map(|(&n, &c)| n.div_ceil(c))
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    'grid: loop {
        let ranges: Vec<IndexRange> = idx
            .iter()
            .zip(chunk_shape)
            .zip(dims)
            .map(|((&i, &c), &n)| IndexRange { start: i * c, stop: ((i + 1) * c).min(n) })
            .collect();
        f(&RegionBox::new(ranges));
        let mut d = dims.len();
        loop {
            if d == 0 {
                break 'grid;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn validate_chunking(dims: &[usize], chunk_shape: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() != chunk_shape.len() {
        return Err(Error::invalid("dims and chunk shape must align and be nonempty"));
    }
    if dims.iter().any(|&n| n == 0) || chunk_shape.iter().any(|&c| c == 0) {
        return Err(Error::invalid("dims and chunk extents must be positive"));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::invalid("too many dimensions"));
    }
    Ok(())
}

/// Write a full tensor with the given chunking.
pub fn write_tensor<T: Scalar>(
    path: impl AsRef<Path>,
    dims: &[usize],
    chunk_shape: &[usize],
    data: &[T],
) -> Result<()> {
    validate_chunking(dims, chunk_shape)?;
    if data.len() != volume(dims) {
        return Err(Error::invalid(format!(
            "data holds {} scalars but dims {:?} have volume {}",
            data.len(),
            dims,
            volume(dims)
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[T::DTYPE.code(), dims.len() as u8])?;
    for &n in dims {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    for &c in chunk_shape {
        out.write_all(&(c as u64).to_le_bytes())?;
    }
    let full = RegionBox::full(dims);
    let mut failure = None;
    for_each_chunk(dims, chunk_shape, |chunk_box| {
        if failure.is_some() {
            return;
        }
        let block = extract_region(data, &full, chunk_box);
        let mut bytes = Vec::with_capacity(block.len() * T::DTYPE.byte_width());
        for v in block {
            v.append_le_bytes(&mut bytes);
        }
        if let Err(e) = out.write_all(&bytes) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    out.flush()?;
    Ok(())
}

/// Read and validate the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut file = BufReader::new(File::open(path)?);
    read_header_from(&mut file)
}

fn read_header_from(file: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 2];
    file.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut meta = [0u8; 2];
    file.read_exact(&mut meta)?;
    let dtype = crate::tensor::Dtype::from_code(meta[0])?;
    let ndim = meta[1] as usize;
    if ndim == 0 {
        return Err(Error::Format("zero-dimensional tensor".into()));
    }
    let mut read_u64s = |count: usize| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            file.read_exact(&mut b)?;
            out.push(u64::from_le_bytes(b) as usize);
        }
        Ok(out)
    };
    let dims = read_u64s(ndim)?;
    let chunk_shape = read_u64s(ndim)?;
    validate_chunking(&dims, &chunk_shape).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Header { dtype, dims, chunk_shape })
}

/// Read the full tensor.
pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<(Header, Vec<T>)> {
    let header = read_header(&path)?;
    let full = RegionBox::full(&header.dims);
    let data = read_region_with_header::<T>(&path, &header, &full)?;
    Ok((header, data))
}

/// Read a rectangular region, touching only the chunks that intersect it.
pub fn read_region<T: Scalar>(path: impl AsRef<Path>, region: &RegionBox) -> Result<Vec<T>> {
    let header = read_header(&path)?;
    read_region_with_header(&path, &header, region)
}

fn read_region_with_header<T: Scalar>(
    path: impl AsRef<Path>,
    header: &Header,
    region: &RegionBox,
) -> Result<Vec<T>> {
    if T::DTYPE != header.dtype {
        return Err(Error::Format(format!(
            "requested {:?} but file holds {:?}",
            T::DTYPE,
            header.dtype
        )));
    }
    if region.ndim() != header.dims.len() || !region.contained_in(&RegionBox::full(&header.dims)) {
        return Err(Error::invalid(format!(
            "region {region:?} outside tensor dims {:?}",
            header.dims
        )));
    }
    let file_len = std::fs::metadata(&path)?.len() as usize;
    if file_len != header.expected_file_len() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "file holds {file_len} bytes but the header implies {}",
                header.expected_file_len()
            ),
        )));
    }

    let mut out = vec![T::zero(); region.volume()];
    if region.is_empty() {
        return Ok(out);
    }
    let mut file = File::open(&path)?;
    let width = header.dtype.byte_width();
    let mut offset = header.byte_len();
    let mut failure: Option<Error> = None;
    for_each_chunk(&header.dims, &header.chunk_shape, |chunk_box| {
        let nbytes = chunk_box.volume() * width;
        let inter = chunk_box.intersect(region);
        if failure.is_none() && !inter.is_empty() {
            let mut run = || -> Result<()> {
                file.seek(SeekFrom::Start(offset as u64))?;
                let mut bytes = vec![0u8; nbytes];
                file.read_exact(&mut bytes)?;
                let block: Vec<T> = bytes.chunks_exact(width).map(T::from_le_bytes).collect();
                copy_region(&block, chunk_box, &mut out, region, &inter);
                Ok(())
            };
            if let Err(e) = run() {
                failure = Some(e);
            }
        }
        offset += nbytes;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
