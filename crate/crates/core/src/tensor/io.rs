//! Flat binary tensor dump: `u32` rank, `u32` extents, then little-endian
//! 32-bit floats. Shared by the debug dump facility and dataset feature blobs.

use std::io::{self, Read, Write};

use super::{Scalar, Tensor};

pub fn write_f32<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32<R: Read>(r: &mut R) -> io::Result<(Vec<usize>, Vec<f32>)> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0f32; numel];
    for v in &mut data {
        r.read_exact(&mut b4)?;
        *v = f32::from_le_bytes(b4);
    }
    Ok((shape, data))
}

pub fn write_tensor<W: Write, T: Scalar>(w: &mut W, t: &Tensor<T>) -> io::Result<()> {
    let data: Vec<f32> = t.data().iter().map(|&v| v.to_f64() as f32).collect();
    write_f32(w, t.shape(), &data)
}

pub fn read_tensor<R: Read, T: Scalar>(r: &mut R) -> io::Result<Tensor<T>> {
    let (shape, data) = read_f32(r)?;
    let cast: Vec<T> = data.iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::from_vec(&shape, cast)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_shape_and_values() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.5, 0.0, 4.25, 1e-7, 9.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}
