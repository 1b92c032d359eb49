//! File formats.
//!
//! CRT1: `C R T 1` magic, four u32 little-endian dims (n, c, h, w), then
//! n*c*h*w f32 little-endian values, row-major.
//!
//! CRP1: `C R P 1` magic, u32 version, tagged sub-blocks (16-byte ASCII tag,
//! space padded). Convolution tags carry two CRT1 blobs (weight as
//! (c_out, c_in, 1, 1), bias as (1, c_out, 1, 1)); matrix tags carry one blob
//! (rows, cols, 1, 1). Tag order: gti1, gti2, vconv, offc, rdcv, wmsk, wq,
//! wk, outc. Trailing scalars: m (u32), r (f32), tau (f32), hard (u8),
//! seed (u64).
//!
//! SCA1: `S C A 1` magic, gate weight and bias as CRT1 blobs.
//!
//! Box records: one per line, `image_id class_id x1 y1 x2 y2 [score]`,
//! whitespace separated; a score on every line makes it a detection file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::crselector::CRSelectorParams;
use crate::error::{Error, Result};
use crate::eval::{BBox, Detection, GroundTruthBox};
use crate::sca::ScAParams;
use crate::tensor::{Conv1x1Params, Matrix, Shape, Tensor};

const CRT1_MAGIC: &[u8; 4] = b"CRT1";
const CRP1_MAGIC: &[u8; 4] = b"CRP1";
const SCA1_MAGIC: &[u8; 4] = b"SCA1";
const CRP1_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// CRT1 tensors
// ---------------------------------------------------------------------------

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(CRT1_MAGIC)?;
    let s = t.shape();
    for dim in [s.n, s.c, s.h, s.w] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated tensor header".into()))?;
    if &magic != CRT1_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected CRT1",
            magic
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated tensor dims".into()))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.len() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated tensor payload".into()))?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("in-memory write");
    atomic_write(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut slice = bytes.as_slice();
    let t = read_tensor(&mut slice)?;
    if !slice.is_empty() {
        return Err(Error::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        )));
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// tagged blocks
// ---------------------------------------------------------------------------

fn write_tag(w: &mut impl Write, tag: &str) -> std::io::Result<()> {
    let mut buf = [b' '; 16];
    buf[..tag.len()].copy_from_slice(tag.as_bytes());
    w.write_all(&buf)
}

fn read_tag(r: &mut impl Read, expected: &str) -> Result<()> {
    let mut buf = [0u8; 16];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated block tag".into()))?;
    let got = std::str::from_utf8(&buf)
        .map_err(|_| Error::Format("non-ASCII block tag".into()))?
        .trim_end();
    if got != expected {
        return Err(Error::Format(format!(
            "unexpected block tag '{got}', expected '{expected}'"
        )));
    }
    Ok(())
}

fn conv_to_tensors(p: &Conv1x1Params) -> (Tensor, Tensor) {
    let weight = Tensor::new(Shape::new(p.c_out, p.c_in, 1, 1), p.weight.clone())
        .expect("conv weight tensor");
    let bias = Tensor::new(Shape::new(1, p.c_out, 1, 1), p.bias.clone()).expect("conv bias tensor");
    (weight, bias)
}

fn write_conv(w: &mut impl Write, tag: &str, p: &Conv1x1Params) -> std::io::Result<()> {
    write_tag(w, tag)?;
    let (weight, bias) = conv_to_tensors(p);
    write_tensor(w, &weight)?;
    write_tensor(w, &bias)
}

fn read_conv(r: &mut impl Read, tag: &str) -> Result<Conv1x1Params> {
    read_tag(r, tag)?;
    let weight = read_tensor(r)?;
    let bias = read_tensor(r)?;
    let ws = weight.shape();
    let bs = bias.shape();
    if bs.n != 1 || bs.c != ws.n || ws.h != 1 || ws.w != 1 || bs.h != 1 || bs.w != 1 {
        return Err(Error::Format(format!(
            "conv block '{tag}': weight {ws} and bias {bs} disagree"
        )));
    }
    Conv1x1Params::new(ws.c, ws.n, weight.data().to_vec(), bias.data().to_vec())
}

fn write_matrix(w: &mut impl Write, tag: &str, m: &Matrix) -> std::io::Result<()> {
    write_tag(w, tag)?;
    let t = Tensor::new(Shape::new(m.rows, m.cols, 1, 1), m.data.clone()).expect("matrix tensor");
    write_tensor(w, &t)
}

fn read_matrix(r: &mut impl Read, tag: &str) -> Result<Matrix> {
    read_tag(r, tag)?;
    let t = read_tensor(r)?;
    let s = t.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Format(format!(
            "matrix block '{tag}': unexpected shape {s}"
        )));
    }
    Matrix::new(s.n, s.c, t.data().to_vec())
}

// ---------------------------------------------------------------------------
// CRP1 parameter bundles
// ---------------------------------------------------------------------------

pub fn write_crselector_params(
    w: &mut impl Write,
    p: &CRSelectorParams,
    seed: u64,
) -> std::io::Result<()> {
    w.write_all(CRP1_MAGIC)?;
    w.write_all(&CRP1_VERSION.to_le_bytes())?;
    write_conv(w, "gti1", &p.gti_conv1)?;
    write_conv(w, "gti2", &p.gti_conv2)?;
    write_conv(w, "vconv", &p.v_conv)?;
    write_conv(w, "offc", &p.offset_conv)?;
    write_conv(w, "rdcv", &p.reduce_conv)?;
    write_matrix(w, "wmsk", &p.w_mask)?;
    write_matrix(w, "wq", &p.w_q)?;
    write_matrix(w, "wk", &p.w_k)?;
    write_conv(w, "outc", &p.out_conv)?;
    w.write_all(&(p.m as u32).to_le_bytes())?;
    w.write_all(&p.r.to_le_bytes())?;
    w.write_all(&p.tau.to_le_bytes())?;
    w.write_all(&[u8::from(p.hard_mask)])?;
    w.write_all(&seed.to_le_bytes())
}

pub fn read_crselector_params(r: &mut impl Read) -> Result<(CRSelectorParams, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated params header".into()))?;
    if &magic != CRP1_MAGIC {
        return Err(Error::Format(format!(
            "bad params magic {:?}, expected CRP1",
            magic
        )));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)
        .map_err(|_| Error::Format("truncated params version".into()))?;
    let version = u32::from_le_bytes(vbuf);
    if version != CRP1_VERSION {
        return Err(Error::Format(format!("unsupported CRP1 version {version}")));
    }
    let gti_conv1 = read_conv(r, "gti1")?;
    let gti_conv2 = read_conv(r, "gti2")?;
    let v_conv = read_conv(r, "vconv")?;
    let offset_conv = read_conv(r, "offc")?;
    let reduce_conv = read_conv(r, "rdcv")?;
    let w_mask = read_matrix(r, "wmsk")?;
    let w_q = read_matrix(r, "wq")?;
    let w_k = read_matrix(r, "wk")?;
    let out_conv = read_conv(r, "outc")?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("truncated scalar m".into()))?;
    let m = u32::from_le_bytes(u32buf) as usize;
    let mut f32buf = [0u8; 4];
    r.read_exact(&mut f32buf)
        .map_err(|_| Error::Format("truncated scalar r".into()))?;
    let rr = f32::from_le_bytes(f32buf);
    r.read_exact(&mut f32buf)
        .map_err(|_| Error::Format("truncated scalar tau".into()))?;
    let tau = f32::from_le_bytes(f32buf);
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)
        .map_err(|_| Error::Format("truncated scalar hard".into()))?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Format("truncated scalar seed".into()))?;
    let seed = u64::from_le_bytes(u64buf);
    let d = w_q.rows;
    let p = CRSelectorParams {
        gti_conv1,
        gti_conv2,
        v_conv,
        offset_conv,
        reduce_conv,
        w_mask,
        w_q,
        w_k,
        out_conv,
        m,
        r: rr,
        tau,
        hard_mask: byte[0] != 0,
        d,
    };
    p.validate().map_err(|e| Error::Format(format!("CRP1 params invalid: {e}")))?;
    Ok((p, seed))
}

pub fn save_crselector_params(path: &Path, p: &CRSelectorParams, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_crselector_params(&mut buf, p, seed).expect("in-memory write");
    atomic_write(path, &buf)
}

pub fn load_crselector_params(path: &Path) -> Result<(CRSelectorParams, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_crselector_params(&mut bytes.as_slice())
}

// ---------------------------------------------------------------------------
// SCA1 parameter files
// ---------------------------------------------------------------------------

pub fn write_sca_params(w: &mut impl Write, p: &ScAParams) -> std::io::Result<()> {
    w.write_all(SCA1_MAGIC)?;
    let (weight, bias) = conv_to_tensors(&p.gate_conv);
    write_tensor(w, &weight)?;
    write_tensor(w, &bias)
}

pub fn read_sca_params(r: &mut impl Read) -> Result<ScAParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated params header".into()))?;
    if &magic != SCA1_MAGIC {
        return Err(Error::Format(format!(
            "bad params magic {:?}, expected SCA1",
            magic
        )));
    }
    let weight = read_tensor(r)?;
    let bias = read_tensor(r)?;
    let ws = weight.shape();
    ScAParams::new(Conv1x1Params::new(
        ws.c,
        ws.n,
        weight.data().to_vec(),
        bias.data().to_vec(),
    )?)
}

pub fn save_sca_params(path: &Path, p: &ScAParams) -> Result<()> {
    let mut buf = Vec::new();
    write_sca_params(&mut buf, p).expect("in-memory write");
    atomic_write(path, &buf)
}

pub fn load_sca_params(path: &Path) -> Result<ScAParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_sca_params(&mut bytes.as_slice())
}

// ---------------------------------------------------------------------------
// box records
// ---------------------------------------------------------------------------

fn parse_box_line(line: &str, lineno: usize) -> Result<(i64, i64, BBox, Option<f64>)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 && fields.len() != 7 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 6 or 7 fields, got {}", fields.len()),
        });
    }
    let parse_i = |s: &str, what: &str| {
        s.parse::<i64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad {what} '{s}'"),
        })
    };
    let parse_f = |s: &str, what: &str| {
        s.parse::<f64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad {what} '{s}'"),
        })
    };
    let image_id = parse_i(fields[0], "image id")?;
    let class_id = parse_i(fields[1], "class id")?;
    let bbox = BBox::new(
        parse_f(fields[2], "x1")?,
        parse_f(fields[3], "y1")?,
        parse_f(fields[4], "x2")?,
        parse_f(fields[5], "y2")?,
    )
    .map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    let score = if fields.len() == 7 {
        Some(parse_f(fields[6], "score")?)
    } else {
        None
    };
    Ok((image_id, class_id, bbox, score))
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (image_id, class_id, bbox, score) = parse_box_line(line, lineno)?;
        let score = score.ok_or(Error::Parse {
            line: lineno,
            msg: "detection record missing score".into(),
        })?;
        out.push(Detection::new(image_id, class_id, bbox, score).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (image_id, class_id, bbox, score) = parse_box_line(line, lineno)?;
        if score.is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: "ground-truth record carries a score".into(),
            });
        }
        out.push(GroundTruthBox {
            image_id,
            class_id,
            bbox,
        });
    }
    Ok(out)
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            d.image_id, d.class_id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score
        ));
    }
    s
}

pub fn format_ground_truth(gts: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for g in gts {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            g.image_id, g.class_id, g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// heatmaps and PGM
// ---------------------------------------------------------------------------

/// Channel-mean activation map for one batch element, min-max normalized to
/// 0..255. A flat map is all zeros.
pub fn channel_mean_heatmap(t: &Tensor, batch: usize) -> Vec<u8> {
    let s = t.shape();
    let mut mean = vec![0.0f32; s.h * s.w];
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                mean[i * s.w + j] += t.get(batch, c, i, j);
            }
        }
    }
    for v in &mut mean {
        *v /= s.c as f32;
    }
    let lo = mean.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return vec![0u8; mean.len()];
    }
    mean.iter()
        .map(|v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5), 8-bit grayscale.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

// ---------------------------------------------------------------------------
// atomic writes
// ---------------------------------------------------------------------------

/// Write via a temp file in the same directory and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn tensor_round_trip_adversarial_shapes() {
        for shape in [
            Shape::new(1, 1, 1, 1),
            Shape::new(1, 1, 1, 7),
            Shape::new(1, 1, 7, 1),
            Shape::new(2, 3, 4, 5),
        ] {
            let t = RngState::new(1).uniform_tensor(shape, 10.0);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            assert_eq!(back.shape(), shape);
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn tensor_rejects_bad_magic_and_truncation() {
        let t = RngState::new(2).uniform_tensor(Shape::new(1, 1, 2, 2), 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 2];
        assert!(read_tensor(&mut &short[..]).is_err());
    }

    #[test]
    fn crselector_params_round_trip() {
        let p = CRSelectorParams::seeded(3, 1, 2, &RngState::new(5));
        let mut buf = Vec::new();
        write_crselector_params(&mut buf, &p, 99).unwrap();
        let (back, seed) = read_crselector_params(&mut buf.as_slice()).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(back.w_mask.data, p.w_mask.data);
        assert_eq!(back.out_conv.weight, p.out_conv.weight);
        assert_eq!(back.m, p.m);
        assert_eq!(back.r, p.r);
        assert_eq!(back.tau, p.tau);
        assert_eq!(back.hard_mask, p.hard_mask);
    }

    #[test]
    fn sca_params_round_trip() {
        let p = ScAParams::new(
            Conv1x1Params::new(3, 1, vec![0.1, -0.2, 0.3], vec![0.5]).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_sca_params(&mut buf, &p).unwrap();
        let back = read_sca_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.gate_conv.weight, p.gate_conv.weight);
        assert_eq!(back.gate_conv.bias, p.gate_conv.bias);
    }

    #[test]
    fn box_parsing_round_trip_and_errors() {
        let dets = parse_detections("0 1 0 0 10 10 0.9\n1 0 5 5 8 9 0.25\n").unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[1].score, 0.25);
        let gts = parse_ground_truth("0 1 0 0 10 10\n").unwrap();
        assert_eq!(gts.len(), 1);

        let err = parse_detections("0 1 0 0 10 10\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_ground_truth("ok\n0 1 0 0 10 10 0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_detections("0 1 0 0 10 10 0.9\n0 1 x 0 10 10 0.9\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));

        let text = format_detections(&dets);
        assert_eq!(parse_detections(&text).unwrap(), dets);
    }

    #[test]
    fn heatmap_constant_is_zero_and_range_maps_full() {
        let flat = Tensor::new(Shape::new(1, 2, 2, 2), vec![3.0; 8]).unwrap();
        assert_eq!(channel_mean_heatmap(&flat, 0), vec![0u8; 4]);
        let t = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(channel_mean_heatmap(&t, 0), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_header() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
    }

    proptest! {
        #[test]
        fn tensor_round_trip_random(n in 1usize..3, c in 1usize..4, hh in 1usize..5, ww in 1usize..5, seed in 0u64..500) {
            let t = RngState::new(seed).uniform_tensor(Shape::new(n, c, hh, ww), 100.0);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
