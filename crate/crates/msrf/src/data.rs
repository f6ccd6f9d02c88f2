//! Image/mask I/O in binary PGM, synthetic dataset generation,
//! augmentation, boundary-map extraction, and dataset splitting.
//!
//! PGM (P5, 8-bit, maxval 255) is the interchange format: masks binarize
//! at pixel value >= 128, images scale to [0,1] by division by 255. The
//! dataset directory layout is `<root>/images/<id>.pgm` paired with
//! `<root>/masks/<id>.pgm` by filename.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/mask pair. The image lives in [0,1], the mask is strictly
/// binary, and both share spatial dims.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

// ---- PGM -------------------------------------------------------------------

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |msg: &str| Error::format(format!("{}: {}", path.display(), msg));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("not a binary PGM (want magic `P5`)"));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err("header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err(&format!("unsupported maxval {} (want 255)", maxval)));
    }
    if w == 0 || h == 0 {
        return Err(err("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err("missing header terminator")),
    }
    if bytes.len() < pos + w * h {
        return Err(err("truncated pixel payload"));
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

/// Loads a PGM as a `[1,H,W]` tensor with values `byte / 255`.
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, pixels) = parse_pgm(&bytes, path)?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Loads a PGM as a binary mask: pixel >= 128 maps to 1.0.
pub fn load_mask_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, pixels) = parse_pgm(&bytes, path)?;
    let data = pixels.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes a `[1,H,W]` (or `[H,W]`) tensor as 8-bit binary PGM, clamping to
/// [0,1] and rounding; save-then-load reproduces the quantized values.
pub fn save_pgm(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::shape(format!("save_pgm expects [1,H,W] or [H,W], got {:?}", other)))
        }
    };
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(t.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

// ---- synthetic data ----------------------------------------------------------

// Shape extents as fractions of the image side. The primary shape is
// larger than the up-to-two secondary ones; with the center band below,
// measured mask fractions stay inside [0.02, 0.6] (see the generator
// tests), while per-shape areas span roughly 5%-40% of the image.
const PRIMARY_RADIUS: (f64, f64) = (0.13, 0.28);
const SECONDARY_RADIUS: (f64, f64) = (0.07, 0.16);
const CENTER_BAND: (f64, f64) = (0.32, 0.68);
const NOISE: f64 = 0.04;

fn stamp_shape(
    mask: &mut [f64],
    size: usize,
    rng: &mut ChaCha8Rng,
    radius: (f64, f64),
) {
    let s = size as f64;
    let cx = rng.gen_range(CENTER_BAND.0..CENTER_BAND.1) * s;
    let cy = rng.gen_range(CENTER_BAND.0..CENTER_BAND.1) * s;
    let rx = rng.gen_range(radius.0..radius.1) * s;
    let ry = rng.gen_range(radius.0..radius.1) * s;
    let rect = rng.gen_bool(0.4);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let inside = if rect {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            } else {
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                mask[y * size + x] = 1.0;
            }
        }
    }
}

/// Deterministic synthetic dataset: 1-3 bright shapes (ellipses or
/// rectangles) of varying size over a darker noisy background, with
/// worst-case pixel contrast >= 0.3.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let base: f64 = rng.gen_range(0.08..0.40);
        let fg = (base + rng.gen_range(0.38..0.55)).min(0.98);
        let mut mask = vec![0.0; size * size];
        stamp_shape(&mut mask, size, &mut rng, PRIMARY_RADIUS);
        let extra = rng.gen_range(0..=2u32);
        for _ in 0..extra {
            stamp_shape(&mut mask, size, &mut rng, SECONDARY_RADIUS);
        }
        let image: Vec<f64> = mask
            .iter()
            .map(|&m| {
                let level = if m != 0.0 { fg } else { base };
                (level + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0)
            })
            .collect();
        samples.push(Sample {
            id: format!("synth_{:04}", i),
            image: Tensor { shape: vec![1, size, size], data: image },
            mask: Tensor { shape: vec![1, size, size], data: mask },
        });
    }
    samples
}

// ---- augmentation --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    RandomCrop,
}

fn map_plane(t: &Tensor, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let in_w = t.shape[2];
    let mut data = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = f(y, x);
            data[y * out_w + x] = t.data[sy * in_w + sx];
        }
    }
    Tensor { shape: vec![1, out_h, out_w], data }
}

fn crop_zero_outside(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut out = Tensor::zeros(vec![1, h, w]);
    for y in y0..y0 + ch {
        for x in x0..x0 + cw {
            out.data[y * w + x] = t.data[y * w + x];
        }
    }
    out
}

/// Applies the requested geometric ops, identically to image and mask.
/// Flips and the quarter-turn are deterministic; the seed drives the crop
/// geometry. The crop keeps its original offset and zero-pads the rest, so
/// spatial dims never change and masks stay binary.
pub fn augment(sample: &Sample, seed: u64, ops: &[AugmentOp]) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    for op in ops {
        let (h, w) = (image.shape[1], image.shape[2]);
        match op {
            AugmentOp::HFlip => {
                image = map_plane(&image, h, w, |y, x| (y, w - 1 - x));
                mask = map_plane(&mask, h, w, |y, x| (y, w - 1 - x));
            }
            AugmentOp::VFlip => {
                image = map_plane(&image, h, w, |y, x| (h - 1 - y, x));
                mask = map_plane(&mask, h, w, |y, x| (h - 1 - y, x));
            }
            AugmentOp::Rot90 => {
                // counter-clockwise quarter turn: out[y][x] = in[x][w-1-y]
                image = map_plane(&image, w, h, |y, x| (x, w - 1 - y));
                mask = map_plane(&mask, w, h, |y, x| (x, w - 1 - y));
            }
            AugmentOp::RandomCrop => {
                let frac = rng.gen_range(0.7..0.95);
                let ch = ((h as f64 * frac) as usize).max(1);
                let cw = ((w as f64 * frac) as usize).max(1);
                let y0 = rng.gen_range(0..=h - ch);
                let x0 = rng.gen_range(0..=w - cw);
                image = crop_zero_outside(&image, y0, x0, ch, cw);
                mask = crop_zero_outside(&mask, y0, x0, ch, cw);
            }
        }
    }
    Sample { id: sample.id.clone(), image, mask }
}

// ---- boundary map ----------------------------------------------------------------

/// A pixel is boundary iff it is set and at least one 4-neighbor is unset;
/// out-of-bounds neighbors count as unset, so an all-ones mask yields a
/// one-pixel frame.
pub fn boundary_map(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = match mask.shape.as_slice() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(Error::shape(format!("boundary_map expects a mask, got {:?}", other))),
    };
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mask.data[y as usize * w + x as usize]
        }
    };
    let mut out = Tensor::zeros(mask.shape.clone());
    for y in 0..h {
        for x in 0..w {
            if mask.data[y * w + x] != 0.0 {
                let (yi, xi) = (y as isize, x as isize);
                let edge = at(yi - 1, xi) == 0.0
                    || at(yi + 1, xi) == 0.0
                    || at(yi, xi - 1) == 0.0
                    || at(yi, xi + 1) == 0.0;
                if edge {
                    out.data[y * w + x] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

// ---- splitting -------------------------------------------------------------------

/// Seeded 80/10/10 split into train/validation/test.
pub fn split(samples: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n = samples.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let pick = |range: &[usize]| range.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    (
        pick(&indices[..n_train]),
        pick(&indices[n_train..n_train + n_val]),
        pick(&indices[n_train + n_val..]),
    )
}

// ---- dataset directories -----------------------------------------------------------

/// Loads every `<root>/images/*.pgm` with its `<root>/masks/` counterpart,
/// sorted by filename for determinism.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::config(format!(
            "dataset root {} has no images/ directory",
            root.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no .pgm images under {}", images_dir.display())));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path.file_stem().unwrap().to_string_lossy().to_string();
        let mask_path = masks_dir.join(format!("{id}.pgm"));
        if !mask_path.is_file() {
            return Err(Error::config(format!("missing mask for image `{}`", id)));
        }
        samples.push(Sample { image: load_pgm(&path)?, mask: load_mask_pgm(&mask_path)?, id });
    }
    Ok(samples)
}

/// Writes samples into the `<root>/{images,masks}` layout.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;
    for s in samples {
        save_pgm(&s.image, &images_dir.join(format!("{}.pgm", s.id)))?;
        save_pgm(&s.mask, &masks_dir.join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("msrf-data-{}-{}", tag, std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn pgm_byte_scaling_is_exact() {
        let dir = tmp_dir("scale");
        let path = dir.join("t.pgm");
        fs::write(&path, [b"P5\n2 2\n255\n".as_slice(), &[0u8, 255, 128, 64]].concat()).unwrap();
        let t = load_pgm(&path).unwrap();
        assert_eq!(t.shape, vec![1, 2, 2]);
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in t.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = load_mask_pgm(&path).unwrap();
        assert_eq!(m.data, vec![0.0, 1.0, 1.0, 0.0]);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_round_trip_reproduces_quantized_values() {
        let dir = tmp_dir("rt");
        let path = dir.join("t.pgm");
        let t = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
        save_pgm(&t, &path).unwrap();
        let back = load_pgm(&path).unwrap();
        save_pgm(&back, &path).unwrap();
        let again = load_pgm(&path).unwrap();
        assert!(back.bit_eq(&again));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_rejects_bad_magic_wrong_maxval_and_truncation() {
        let dir = tmp_dir("bad");
        let p = dir.join("a.pgm");
        fs::write(&p, b"P2\n2 2\n255\n0000").unwrap();
        assert!(matches!(load_pgm(&p), Err(Error::Format(_))));
        fs::write(&p, b"P5\n2 2\n65535\n0000").unwrap();
        assert!(matches!(load_pgm(&p), Err(Error::Format(_))));
        fs::write(&p, [b"P5\n2 2\n255\n".as_slice(), &[0u8, 1]].concat()).unwrap();
        assert!(matches!(load_pgm(&p), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn synth_is_deterministic_with_nonempty_masks() {
        let a = synth_dataset(20, 64, 7);
        let b = synth_dataset(20, 64, 7);
        assert_eq!(a.len(), 20);
        for (s1, s2) in a.iter().zip(&b) {
            assert!(s1.image.bit_eq(&s2.image));
            assert!(s1.mask.bit_eq(&s2.mask));
            assert!(s1.mask.data.iter().any(|&v| v != 0.0));
            assert!(s1.mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s1.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synth_mask_fraction_stays_in_measured_bounds() {
        for seed in [1u64, 7, 42, 1234] {
            for s in synth_dataset(50, 64, seed) {
                let frac =
                    s.mask.data.iter().sum::<f64>() / s.mask.numel() as f64;
                assert!(
                    (0.02..=0.6).contains(&frac),
                    "seed {} sample {} fraction {}",
                    seed,
                    s.id,
                    frac
                );
            }
        }
    }

    #[test]
    fn flips_and_quarter_turns_compose_to_identity() {
        let s = &synth_dataset(1, 16, 3)[0];
        let twice = augment(&augment(s, 0, &[AugmentOp::HFlip]), 0, &[AugmentOp::HFlip]);
        assert!(twice.image.bit_eq(&s.image) && twice.mask.bit_eq(&s.mask));
        let mut r = s.clone();
        for _ in 0..4 {
            r = augment(&r, 0, &[AugmentOp::Rot90]);
        }
        assert!(r.image.bit_eq(&s.image) && r.mask.bit_eq(&s.mask));
    }

    #[test]
    fn every_augment_keeps_masks_binary_and_images_in_range() {
        let s = &synth_dataset(1, 32, 9)[0];
        for op in [AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Rot90, AugmentOp::RandomCrop] {
            let out = augment(s, 5, &[op]);
            assert!(out.mask.data.iter().all(|&v| v == 0.0 || v == 1.0), "{:?}", op);
            assert!(out.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(out.image.shape, s.image.shape);
        }
    }

    #[test]
    fn boundary_of_all_ones_is_a_frame_and_single_pixel_is_itself() {
        let ones = Tensor::full(vec![1, 4, 4], 1.0);
        let b = boundary_map(&ones).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y == 0 || y == 3 || x == 0 || x == 3 { 1.0 } else { 0.0 };
                assert_eq!(b.data[y * 4 + x], expect);
            }
        }
        let mut single = Tensor::zeros(vec![1, 3, 3]);
        single.data[4] = 1.0;
        assert!(boundary_map(&single).unwrap().bit_eq(&single));
    }

    #[test]
    fn boundary_matches_neighbor_loop_oracle_and_is_subset_of_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, w) = (9, 7);
            let mask = Tensor {
                shape: vec![1, h, w],
                data: (0..h * w).map(|_| rng.gen_bool(0.5) as u8 as f64).collect(),
            };
            let b = boundary_map(&mask).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let get = |yy: isize, xx: isize| {
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            0.0
                        } else {
                            mask.data[yy as usize * w + xx as usize]
                        }
                    };
                    let m = mask.data[y * w + x];
                    let expect = if m != 0.0 {
                        let (yi, xi) = (y as isize, x as isize);
                        let n = [get(yi - 1, xi), get(yi + 1, xi), get(yi, xi - 1), get(yi, xi + 1)];
                        n.iter().any(|&v| v == 0.0) as u8 as f64
                    } else {
                        0.0
                    };
                    assert_eq!(b.data[y * w + x], expect);
                    assert!(b.data[y * w + x] <= m);
                }
            }
        }
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let samples = synth_dataset(20, 16, 1);
        let (tr, va, te) = split(&samples, 5);
        assert_eq!((tr.len(), va.len(), te.len()), (16, 2, 2));
        let mut ids: Vec<&str> = tr.iter().chain(&va).chain(&te).map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        let (tr2, va2, te2) = split(&samples, 5);
        for (a, b) in tr.iter().zip(&tr2) {
            assert_eq!(a.id, b.id);
        }
        for (a, b) in va.iter().zip(&va2).chain(te.iter().zip(&te2)) {
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tmp_dir("ds");
        let samples = synth_dataset(4, 16, 2);
        save_dataset(&samples, &dir).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert!(a.mask.bit_eq(&b.mask));
            assert_eq!(a.image.shape, b.image.shape);
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
