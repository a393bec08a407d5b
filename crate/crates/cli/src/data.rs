//! IDX files and synthetic Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sliceout::trainer::{Dataset, Split};
use sliceout::{Error, Result, Tensor};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Decoded images, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> Tensor<f64> {
        let n = self.rows * self.cols;
        Tensor::from_vec(self.pixels[i * n..(i + 1) * n].to_vec(), &[self.rows, self.cols]).expect("sized")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Io(format!(
                "{} is truncated: needed {} more bytes at offset {}, {} left",
                self.what,
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32()?;
        if got != want {
            return Err(Error::Format(format!("{}: magic number {got}, expected {want}", self.what)));
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<IdxImages> {
    let mut r = Reader { bytes, pos: 0, what };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let raw = r.take(count * rows * cols)?;
    Ok(IdxImages { count, rows, cols, pixels: raw.iter().map(|&b| f64::from(b) / 255.0).collect() })
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0, what };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| usize::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Reads an image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<usize>)> {
    let img = parse_idx_images(&read(images)?, &images.display().to_string())?;
    let lab = parse_idx_labels(&read(labels)?, &labels.display().to_string())?;
    if img.count != lab.len() {
        return Err(Error::Consistency(format!("{} images but {} labels", img.count, lab.len())));
    }
    Ok((img, lab))
}

pub fn idx_split(images: &IdxImages, labels: Vec<usize>) -> Split {
    Split { x: images.pixels.clone(), y: labels }
}

/// Dataset from IDX train files and optional test files. Classes are
/// `max label + 1`.
pub fn idx_dataset(train: (&Path, &Path), test: Option<(&Path, &Path)>) -> Result<Dataset> {
    let (img, lab) = load_idx(train.0, train.1)?;
    let dim = img.rows * img.cols;
    let train_split = idx_split(&img, lab);
    let test_split = match test {
        Some((i, l)) => {
            let (ti, tl) = load_idx(i, l)?;
            if ti.rows * ti.cols != dim {
                return Err(Error::Consistency(format!(
                    "test images are {}x{}, train images {}x{}",
                    ti.rows, ti.cols, img.rows, img.cols
                )));
            }
            idx_split(&ti, tl)
        }
        None => Split::default(),
    };
    let classes = train_split.y.iter().chain(&test_split.y).max().map_or(1, |&m| m + 1).max(2);
    Ok(Dataset { dim, classes, train: train_split, test: test_split })
}

/// Gaussian clusters around centers drawn uniformly from `[-1, 1]^dim`;
/// each class contributes `n` points, 80% of them to the training split.
pub fn gen_blobs(classes: usize, dim: usize, n: usize, seed: u64, spread: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    if dim == 0 || n == 0 || !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("invalid blobs parameters dim={dim} n={n} spread={spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n_train = (n * 4) / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n {
            let row: Vec<f64> = center.iter().map(|&m| m + spread * noise.sample(&mut rng)).collect();
            if i < n_train {
                train.push((row, c));
            } else {
                test.push((row, c));
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let split = |rows: Vec<(Vec<f64>, usize)>| {
        let mut s = Split::default();
        for (r, c) in rows {
            s.x.extend(r);
            s.y.push(c);
        }
        s
    };
    Ok(Dataset { dim, classes, train: split(train), test: split(test) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_fixture(magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, 2, 2, 2] {
            b.extend(v.to_be_bytes());
        }
        b.extend([0, 255, 51, 102, 255, 0, 0, 255]);
        b
    }

    #[test]
    fn images_round_trip() {
        let img = parse_idx_images(&image_fixture(IMAGE_MAGIC), "fixture").unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 2, 2));
        assert_eq!(img.image(0).to_vec(), vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(img.image(1).shape(), &[2, 2]);
    }

    #[test]
    fn wrong_magic_is_named() {
        let e = parse_idx_images(&image_fixture(2050), "fixture").unwrap_err();
        assert!(matches!(&e, Error::Format(m) if m.contains("2050")), "{e}");
    }

    #[test]
    fn truncated_is_io() {
        let b = image_fixture(IMAGE_MAGIC);
        assert!(matches!(parse_idx_images(&b[..b.len() - 1], "fixture"), Err(Error::Io(_))));
    }

    #[test]
    fn labels() {
        let mut b = Vec::new();
        b.extend(LABEL_MAGIC.to_be_bytes());
        b.extend(1u32.to_be_bytes());
        b.push(7);
        assert_eq!(parse_idx_labels(&b, "labels").unwrap(), vec![7]);
    }

    #[test]
    fn blob_split_and_determinism() {
        let a = gen_blobs(10, 64, 500, 3, 1.0).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (4000, 1000));
        assert_eq!(a, gen_blobs(10, 64, 500, 3, 1.0).unwrap());
        assert!(gen_blobs(1, 4, 10, 0, 1.0).is_err());
    }
}
