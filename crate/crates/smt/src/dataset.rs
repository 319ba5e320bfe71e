//! Image dataset loading (MNIST IDX, CIFAR binary) and patch-grid extraction.
//!
//! Parsers are written against byte slices so untrusted input can be handled
//! (and fuzzed) without touching the filesystem; the `load_*` functions wrap
//! them with file IO.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Result, SmtError};

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

const CIFAR_PIXELS: usize = 32 * 32 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A single image stored as interleaved HWC bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved pixel bytes; length `height * width * channels`.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }
}

/// A labelled image collection with uniform geometry.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| SmtError::io(path, e))
}

fn truncated(path: &Path, needed: usize, got: usize) -> SmtError {
    SmtError::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("need {needed} bytes, file has {got}"),
        ),
    )
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parse an IDX3 image file (big-endian header, uint8 pixels).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Image>> {
    if bytes.len() < 4 {
        return Err(truncated(path, 4, bytes.len()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_MAGIC_IMAGES {
        return Err(SmtError::Format(format!(
            "{}: bad IDX image magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}",
            path.display()
        )));
    }
    if bytes.len() < 16 {
        return Err(truncated(path, 16, bytes.len()));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let pixels = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(count))
        .ok_or_else(|| SmtError::Format(format!("{}: IDX dimensions overflow", path.display())))?;
    let needed = 16 + pixels;
    if bytes.len() < needed {
        return Err(truncated(path, needed, bytes.len()));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        images.push(Image::new(
            rows,
            cols,
            1,
            bytes[start..start + rows * cols].to_vec(),
        ));
    }
    Ok(images)
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 4 {
        return Err(truncated(path, 4, bytes.len()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_MAGIC_LABELS {
        return Err(SmtError::Format(format!(
            "{}: bad IDX label magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}",
            path.display()
        )));
    }
    if bytes.len() < 8 {
        return Err(truncated(path, 8, bytes.len()));
    }
    let count = be_u32(bytes, 4) as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(truncated(path, needed, bytes.len()));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Load an MNIST-style IDX image/label pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<ImageDataset> {
    let images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(SmtError::Format(format!(
            "image/label count mismatch: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(SmtError::Format(format!("label {bad} out of range 0..=9")));
    }
    Ok(ImageDataset {
        images,
        labels,
        num_classes: 10,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }
}

/// Parse one CIFAR binary batch file. Records are `label_bytes` label bytes
/// followed by 3072 channel-planar RGB bytes; CIFAR-100 uses the fine label
/// (second label byte).
pub fn parse_cifar_batch(
    bytes: &[u8],
    variant: CifarVariant,
    path: &Path,
) -> Result<(Vec<Image>, Vec<u8>)> {
    let record = variant.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(SmtError::Format(format!(
            "{}: length {} is not a positive multiple of record size {record}",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / record;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let rec = &bytes[r * record..(r + 1) * record];
        let label = rec[variant.label_bytes() - 1];
        if label as usize >= variant.num_classes() {
            return Err(SmtError::Format(format!(
                "{}: record {r} label {label} out of range 0..{}",
                path.display(),
                variant.num_classes()
            )));
        }
        // channel-planar to interleaved HWC
        let planes = &rec[variant.label_bytes()..];
        let mut pixels = vec![0u8; CIFAR_PIXELS];
        for p in 0..32 * 32 {
            pixels[p * 3] = planes[p];
            pixels[p * 3 + 1] = planes[1024 + p];
            pixels[p * 3 + 2] = planes[2048 + p];
        }
        images.push(Image::new(32, 32, 3, pixels));
        labels.push(label);
    }
    Ok((images, labels))
}

/// Load CIFAR-10/100 from one or more binary batch files.
pub fn load_cifar_binary(
    paths: &[PathBuf],
    variant: CifarVariant,
    split: Split,
) -> Result<ImageDataset> {
    if paths.is_empty() {
        return Err(SmtError::InvalidArgument("no CIFAR batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (mut i, mut l) = parse_cifar_batch(&read_file(path)?, variant, path)?;
        images.append(&mut i);
        labels.append(&mut l);
    }
    Ok(ImageDataset {
        images,
        labels,
        num_classes: variant.num_classes(),
        split,
    })
}

/// Dense stride-1 grid of flattened, `[0,1]`-scaled patches from one image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// One patch per row, length `patch_side² · channels`, values in `[0,1]`.
    pub patches: Array2<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_side: usize,
    pub channels: usize,
}

impl PatchGrid {
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_cols + col
    }

    pub fn len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// Decompose an image into all overlapping `side × side` patches (stride 1).
/// Pixel bytes are scaled to `[0,1]`.
pub fn extract_patches(image: &Image, side: usize) -> Result<PatchGrid> {
    if side == 0 || side > image.height || side > image.width {
        return Err(SmtError::InvalidArgument(format!(
            "patch side {side} out of range for {}x{} image",
            image.height, image.width
        )));
    }
    let grid_rows = image.height - side + 1;
    let grid_cols = image.width - side + 1;
    let dim = side * side * image.channels;
    let mut patches = Array2::zeros((grid_rows * grid_cols, dim));
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let mut row = patches.row_mut(gr * grid_cols + gc);
            let mut k = 0;
            for r in gr..gr + side {
                let base = (r * image.width + gc) * image.channels;
                for &b in &image.pixels[base..base + side * image.channels] {
                    row[k] = f64::from(b) / 255.0;
                    k += 1;
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_rows,
        grid_cols,
        patch_side: side,
        channels: image.channels,
    })
}

/// Reverse column order, keeping channels together. Involutive.
pub fn horizontal_flip(image: &Image) -> Image {
    let mut pixels = vec![0u8; image.pixels.len()];
    for r in 0..image.height {
        for c in 0..image.width {
            let src = (r * image.width + c) * image.channels;
            let dst = (r * image.width + (image.width - 1 - c)) * image.channels;
            pixels[dst..dst + image.channels]
                .copy_from_slice(&image.pixels[src..src + image.channels]);
        }
    }
    Image::new(image.height, image.width, image.channels, pixels)
}

/// BT.601 luma conversion: y = 0.299 R + 0.587 G + 0.114 B, rounded to nearest.
pub fn to_grayscale(image: &Image) -> Result<Image> {
    if image.channels != 3 {
        return Err(SmtError::InvalidArgument(format!(
            "grayscale conversion needs 3 channels, got {}",
            image.channels
        )));
    }
    let mut pixels = Vec::with_capacity(image.height * image.width);
    for p in image.pixels.chunks_exact(3) {
        let y = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
        pixels.push(y.round() as u8);
    }
    Ok(Image::new(image.height, image.width, 1, pixels))
}

/// Debug export as binary PPM (P6); single-channel images are replicated
/// across RGB.
pub fn write_ppm<W: std::io::Write>(image: &Image, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<ppm>", e);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height).map_err(io_err)?;
    match image.channels {
        3 => w.write_all(&image.pixels).map_err(io_err)?,
        1 => {
            for &b in &image.pixels {
                w.write_all(&[b, b, b]).map_err(io_err)?;
            }
        }
        other => {
            return Err(SmtError::InvalidArgument(format!(
                "cannot export {other}-channel image as PPM"
            )))
        }
    }
    Ok(())
}

/// Dataset root: `SMT_DATA_DIR` if set, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("SMT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn gradient_image(h: usize, w: usize, ch: usize) -> Image {
        let pixels = (0..h * w * ch).map(|i| (i % 251) as u8).collect();
        Image::new(h, w, ch, pixels)
    }

    #[test]
    fn idx_roundtrip_synthetic() {
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| i as u8).collect();
        let bytes = idx_image_bytes(2, 3, 4, &pixels);
        let images = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].height, 3);
        assert_eq!(images[0].width, 4);
        assert_eq!(images[1].pixels, &pixels[12..24]);
    }

    #[test]
    fn idx_label_magic_rejected_as_images() {
        // a label file handed to the image parser must fail on magic
        let bytes = idx_label_bytes(&[1, 2, 3]);
        let err = parse_idx_images(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, SmtError::Format(_)), "{err}");
        // and an image file handed to the label parser likewise
        let bytes = idx_image_bytes(1, 2, 2, &[0, 0, 0, 0]);
        let err = parse_idx_labels(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, SmtError::Format(_)), "{err}");
    }

    #[test]
    fn idx_truncated_is_io_error() {
        let pixels = vec![0u8; 5];
        let bytes = idx_image_bytes(2, 3, 4, &pixels); // needs 24 pixel bytes
        let err = parse_idx_images(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, SmtError::Io { .. }), "{err}");
    }

    #[test]
    fn cifar_record_shapes() {
        // two CIFAR-100 records; fine label is the second byte
        let mut bytes = Vec::new();
        for (coarse, fine) in [(3u8, 42u8), (7, 99)] {
            bytes.push(coarse);
            bytes.push(fine);
            bytes.extend(std::iter::repeat(128u8).take(CIFAR_PIXELS));
        }
        let (images, labels) =
            parse_cifar_batch(&bytes, CifarVariant::Cifar100, Path::new("mem")).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(labels, vec![42, 99]);
    }

    #[test]
    fn cifar_bad_length_rejected() {
        let bytes = vec![0u8; 3073 * 2 + 1];
        let err = parse_cifar_batch(&bytes, CifarVariant::Cifar10, Path::new("mem")).unwrap_err();
        assert!(matches!(err, SmtError::Format(_)));
    }

    #[test]
    fn cifar_planar_to_interleaved() {
        let mut bytes = vec![5u8]; // label
        let mut planes = vec![0u8; CIFAR_PIXELS];
        planes[0] = 10; // R of pixel 0
        planes[1024] = 20; // G of pixel 0
        planes[2048] = 30; // B of pixel 0
        bytes.extend_from_slice(&planes);
        let (images, _) =
            parse_cifar_batch(&bytes, CifarVariant::Cifar10, Path::new("mem")).unwrap();
        assert_eq!(images[0].pixel(0, 0, 0), 10);
        assert_eq!(images[0].pixel(0, 0, 1), 20);
        assert_eq!(images[0].pixel(0, 0, 2), 30);
    }

    #[test]
    fn patch_counts_match_grid_formula() {
        let img = gradient_image(28, 28, 1);
        let grid = extract_patches(&img, 6).unwrap();
        assert_eq!(grid.len(), 529);
        assert_eq!((grid.grid_rows, grid.grid_cols), (23, 23));

        let img = gradient_image(32, 32, 3);
        let grid = extract_patches(&img, 6).unwrap();
        assert_eq!(grid.len(), 729);
        assert_eq!(grid.patch_dim(), 108);
    }

    #[test]
    fn whole_image_patch_is_identity() {
        let img = gradient_image(5, 5, 2);
        let grid = extract_patches(&img, 5).unwrap();
        assert_eq!(grid.len(), 1);
        for (k, &b) in img.pixels.iter().enumerate() {
            assert_eq!(grid.patches[[0, k]], f64::from(b) / 255.0);
        }
    }

    #[test]
    fn oversized_patch_rejected() {
        let img = gradient_image(4, 4, 1);
        assert!(matches!(
            extract_patches(&img, 5),
            Err(SmtError::InvalidArgument(_))
        ));
    }

    #[test]
    fn flip_moves_single_pixel() {
        let mut img = Image::new(4, 5, 1, vec![0; 20]);
        img.pixels[(1 * 5 + 1) * 1] = 200; // (row 1, col 1)
        let flipped = horizontal_flip(&img);
        assert_eq!(flipped.pixel(1, 3, 0), 200);
        assert_eq!(flipped.pixel(1, 1, 0), 0);
    }

    #[test]
    fn grayscale_weights() {
        let white = Image::new(1, 1, 3, vec![255, 255, 255]);
        assert_eq!(to_grayscale(&white).unwrap().pixels, vec![255]);

        // 0.299 * 255 = 76.245, rounds to 76
        let red = Image::new(1, 1, 3, vec![255, 0, 0]);
        assert_eq!(to_grayscale(&red).unwrap().pixels, vec![76]);

        let gray = Image::new(1, 2, 3, vec![99, 99, 99, 17, 17, 17]);
        assert_eq!(to_grayscale(&gray).unwrap().pixels, vec![99, 17]);

        let mono = Image::new(1, 1, 1, vec![7]);
        assert!(to_grayscale(&mono).is_err());
    }

    proptest! {
        #[test]
        fn flip_is_involutive(h in 1usize..8, w in 1usize..8, ch in 1usize..4, seed in any::<u64>()) {
            let mut s = seed;
            let pixels: Vec<u8> = (0..h * w * ch).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 56) as u8
            }).collect();
            let img = Image::new(h, w, ch, pixels);
            prop_assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
        }

        #[test]
        fn flipped_patch_grid_is_mirrored(seed in any::<u64>()) {
            let (h, w, t) = (7, 9, 3);
            let mut s = seed;
            let pixels: Vec<u8> = (0..h * w).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 56) as u8
            }).collect();
            let img = Image::new(h, w, 1, pixels);
            let grid = extract_patches(&img, t).unwrap();
            let flipped_grid = extract_patches(&horizontal_flip(&img), t).unwrap();
            // patch (i, j) of the flipped image == patch (i, cols-1-j) of the
            // original with columns reversed inside the patch
            for i in 0..grid.grid_rows {
                for j in 0..grid.grid_cols {
                    let a = flipped_grid.patches.row(flipped_grid.index(i, j));
                    let b = grid.patches.row(grid.index(i, grid.grid_cols - 1 - j));
                    for r in 0..t {
                        for c in 0..t {
                            prop_assert_eq!(a[r * t + c], b[r * t + (t - 1 - c)]);
                        }
                    }
                }
            }
        }
    }

    // Tests against the real files; they skip when the dataset directory is
    // absent so the suite stays runnable on a bare checkout.
    mod real_data {
        use super::*;

        fn mnist_dir() -> Option<PathBuf> {
            let dir = default_data_dir().join("mnist");
            dir.join("train-images-idx3-ubyte").exists().then_some(dir)
        }

        #[test]
        fn mnist_train_shape() {
            let Some(dir) = mnist_dir() else {
                eprintln!("skipping: MNIST not found under {:?}", default_data_dir());
                return;
            };
            let ds = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                Split::Train,
            )
            .unwrap();
            assert_eq!(ds.len(), 60_000);
            assert_eq!((ds.images[0].height, ds.images[0].width), (28, 28));
        }

        #[test]
        fn mnist_first_test_image_checksum() {
            let Some(dir) = mnist_dir() else {
                eprintln!("skipping: MNIST not found under {:?}", default_data_dir());
                return;
            };
            let path = dir.join("t10k-images-idx3-ubyte");
            let ds = load_mnist_idx(&path, &dir.join("t10k-labels-idx1-ubyte"), Split::Test).unwrap();
            // independent oracle: byte-sum straight off the file
            let raw = std::fs::read(&path).unwrap();
            let expected: u64 = raw[16..16 + 784].iter().map(|&b| u64::from(b)).sum();
            let got: u64 = ds.images[0].pixels.iter().map(|&b| u64::from(b)).sum();
            assert_eq!(got, expected);
        }

        #[test]
        fn cifar10_per_class_counts() {
            let dir = default_data_dir().join("cifar10");
            if !dir.join("data_batch_1.bin").exists() {
                eprintln!("skipping: CIFAR-10 not found under {:?}", default_data_dir());
                return;
            }
            let paths: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let ds = load_cifar_binary(&paths, CifarVariant::Cifar10, Split::Train).unwrap();
            assert_eq!(ds.len(), 50_000);
            // independent oracle: count labels straight off the record layout
            let mut expected = [0usize; 10];
            for p in &paths {
                let bytes = std::fs::read(p).unwrap();
                for rec in bytes.chunks_exact(3073) {
                    expected[rec[0] as usize] += 1;
                }
            }
            let mut got = [0usize; 10];
            for &l in &ds.labels {
                got[l as usize] += 1;
            }
            assert_eq!(got, expected);
            assert!(got.iter().all(|&c| c == 5_000));
        }
    }
}
