//! Image and volume transforms applied before prediction.

use crate::error::{Error, Result};
use crate::types::{Image, Volume};

/// Default foreground threshold for [`crop_body`].
pub const DEFAULT_FG_THRESHOLD: f32 = 0.05;

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }
}

/// Crops an image to the tight box around pixels brighter than
/// `fg_threshold`, removing scanner padding around the body.
pub fn crop_body(img: &Image, fg_threshold: f32) -> Result<(Image, BBox)> {
    if img.data().is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut bbox: Option<BBox> = None;
    for r in 0..img.height() {
        for (c, &v) in img.row(r).iter().enumerate() {
            if v > fg_threshold {
                let b = bbox.get_or_insert(BBox {
                    row_min: r,
                    col_min: c,
                    row_max: r,
                    col_max: c,
                });
                b.col_min = b.col_min.min(c);
                b.col_max = b.col_max.max(c);
                b.row_max = r;
            }
        }
    }
    let bbox = bbox.ok_or(Error::EmptyForeground(f64::from(fg_threshold)))?;
    Ok((crop(img, &bbox), bbox))
}

pub fn crop(img: &Image, b: &BBox) -> Image {
    let mut data = Vec::with_capacity(b.width() * b.height());
    for r in b.row_min..=b.row_max {
        data.extend_from_slice(&img.row(r)[b.col_min..=b.col_max]);
    }
    Image::from_raw(b.width(), b.height(), data)
}

/// Splits into left `[0, w/2)` and right `[w/2, w)` column halves; odd
/// widths give the extra column to the right half.
pub fn split_lungs(img: &Image) -> Result<(Image, Image)> {
    let w = img.width();
    if w < 2 {
        return Err(Error::TooNarrow(w));
    }
    let mid = w / 2;
    let h = img.height();
    let mut left = Vec::with_capacity(mid * h);
    let mut right = Vec::with_capacity((w - mid) * h);
    for r in 0..h {
        let row = img.row(r);
        left.extend_from_slice(&row[..mid]);
        right.extend_from_slice(&row[mid..]);
    }
    Ok((Image::from_raw(mid, h, left), Image::from_raw(w - mid, h, right)))
}

/// Source coordinate and blend weight for one output pixel under
/// half-pixel-center alignment.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::ZeroTarget(out_w, out_h));
    }
    if img.data().is_empty() {
        return Err(Error::EmptyInput);
    }
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, img.width(), out_w)).collect();
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, ty) = source_coord(y, img.height(), out_h);
        let (r0, r1) = (img.row(y0), img.row(y1));
        for &(x0, x1, tx) in &xs {
            let lerp = |a: f32, b: f32, t: f64| {
                let a = f64::from(a);
                a + t * (f64::from(b) - a)
            };
            let top = lerp(r0[x0], r0[x1], tx);
            let bottom = lerp(r1[x0], r1[x1], tx);
            let v = top + ty * (bottom - top);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Image::from_raw(out_w, out_h, data))
}

/// Three equally sized channels: previous, current and next slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniVolume {
    channels: [Image; 3],
}

impl MiniVolume {
    pub fn new(channels: [Image; 3]) -> Result<Self> {
        let (w, h) = (channels[0].width(), channels[0].height());
        if channels.iter().any(|c| c.width() != w || c.height() != h) {
            return Err(Error::InvariantViolation("mini-volume channels differ in size".into()));
        }
        Ok(MiniVolume { channels })
    }

    pub fn channels(&self) -> &[Image; 3] {
        &self.channels
    }
}

/// Source slice indices for the mini-volume centered on `i`; the first and
/// last slice stand in for their own missing neighbour.
pub fn minivolume_indices(n: usize, i: usize) -> Result<[usize; 3]> {
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    Ok([i.saturating_sub(1), i, (i + 1).min(n - 1)])
}

pub fn build_minivolume(vol: &Volume, i: usize) -> Result<MiniVolume> {
    let idx = minivolume_indices(vol.len(), i)?;
    let s = vol.slices();
    MiniVolume::new(idx.map(|j| s[j].clone()))
}

/// Nearest-neighbour depth resampling: `out[j] = items[floor(j * n / target)]`.
pub fn depth_resize<T: Clone>(items: &[T], target: usize) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    if target == 0 {
        return Err(Error::ZeroTarget(target, 1));
    }
    let n = items.len();
    Ok((0..target).map(|j| items[j * n / target].clone()).collect())
}

/// Axis flips. Composition is component-wise XOR, so the eight values form
/// the group `(Z/2)^3`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlipSpec {
    pub horizontal: bool,
    pub vertical: bool,
    pub depth: bool,
}

impl FlipSpec {
    pub const IDENTITY: FlipSpec = FlipSpec::new(false, false, false);

    pub const fn new(horizontal: bool, vertical: bool, depth: bool) -> Self {
        FlipSpec {
            horizontal,
            vertical,
            depth,
        }
    }

    /// All eight specs, counting `(h, v, d)` in binary from `000` to `111`.
    pub fn all() -> [FlipSpec; 8] {
        std::array::from_fn(|i| FlipSpec::new(i & 4 != 0, i & 2 != 0, i & 1 != 0))
    }

    pub fn compose(self, other: FlipSpec) -> FlipSpec {
        FlipSpec::new(
            self.horizontal ^ other.horizontal,
            self.vertical ^ other.vertical,
            self.depth ^ other.depth,
        )
    }
}

pub trait Flip: Sized {
    fn flip(&self, spec: FlipSpec) -> Self;
}

impl Flip for Image {
    /// Horizontal reverses columns, vertical reverses rows; `depth` has no
    /// effect on a single slice.
    fn flip(&self, spec: FlipSpec) -> Self {
        let (w, h) = (self.width(), self.height());
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            let src = if spec.vertical { h - 1 - r } else { r };
            let row = self.row(src);
            if spec.horizontal {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
        Image::from_raw(w, h, data)
    }
}

impl Flip for Volume {
    fn flip(&self, spec: FlipSpec) -> Self {
        let in_plane = FlipSpec { depth: false, ..spec };
        let mut slices: Vec<Image> = if in_plane == FlipSpec::IDENTITY {
            self.slices().to_vec()
        } else {
            self.slices().iter().map(|s| s.flip(in_plane)).collect()
        };
        if spec.depth {
            slices.reverse();
        }
        Volume::new(self.patient_id(), slices, self.label()).expect("flip preserves volume invariants")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |r, c| ((r * w + c) as f32) / ((w * h) as f32)).unwrap()
    }

    #[test]
    fn crop_full_foreground() {
        let img = Image::filled(7, 5, 1.0).unwrap();
        let (out, b) = crop_body(&img, DEFAULT_FG_THRESHOLD).unwrap();
        assert_eq!(
            b,
            BBox {
                row_min: 0,
                col_min: 0,
                row_max: 4,
                col_max: 6
            }
        );
        assert_eq!(out, img);
    }

    #[test]
    fn crop_known_box() {
        let img = Image::from_fn(100, 80, |r, c| {
            if (10..=50).contains(&r) && (20..=60).contains(&c) {
                0.7
            } else {
                0.0
            }
        })
        .unwrap();
        let (out, b) = crop_body(&img, 0.05).unwrap();
        assert_eq!(
            b,
            BBox {
                row_min: 10,
                col_min: 20,
                row_max: 50,
                col_max: 60
            }
        );
        assert_eq!((out.width(), out.height()), (41, 41));
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn crop_empty_foreground() {
        let img = Image::filled(4, 4, 0.0).unwrap();
        assert!(matches!(crop_body(&img, 0.05), Err(Error::EmptyForeground(_))));
    }

    #[test]
    fn split_even_and_odd() {
        let (l, r) = split_lungs(&ramp(256, 3)).unwrap();
        assert_eq!((l.width(), r.width()), (128, 128));
        assert_eq!(r.get(0, 0), ramp(256, 3).get(0, 128));
        let (l, r) = split_lungs(&ramp(257, 3)).unwrap();
        assert_eq!((l.width(), r.width()), (128, 129));
        assert!(matches!(split_lungs(&ramp(1, 3)), Err(Error::TooNarrow(1))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(9, 6);
        let same = resize_bilinear(&img, 9, 6).unwrap();
        for (a, b) in img.data().iter().zip(same.data()) {
            assert!((f64::from(*a) - f64::from(*b)).abs() <= 1e-12);
        }
        let c = Image::filled(5, 3, 0.37).unwrap();
        for (w, h) in [(1, 1), (17, 4), (3, 11)] {
            let out = resize_bilinear(&c, w, h).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.37));
        }
        assert!(matches!(resize_bilinear(&img, 0, 4), Err(Error::ZeroTarget(0, 4))));
    }

    #[test]
    fn minivolume_edges() {
        assert_eq!(minivolume_indices(10, 5).unwrap(), [4, 5, 6]);
        assert_eq!(minivolume_indices(10, 0).unwrap(), [0, 0, 1]);
        assert_eq!(minivolume_indices(10, 9).unwrap(), [8, 9, 9]);
        assert_eq!(minivolume_indices(1, 0).unwrap(), [0, 0, 0]);
        assert!(matches!(minivolume_indices(10, 10), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn build_minivolume_uses_neighbours() {
        let slices: Vec<_> = (0..10).map(|i| Image::filled(2, 2, i as f32 / 10.0).unwrap()).collect();
        let vol = Volume::new("p", slices, None).unwrap();
        let mv = build_minivolume(&vol, 5).unwrap();
        let v: Vec<f32> = mv.channels().iter().map(|c| c.get(0, 0)).collect();
        assert_eq!(v, [0.4, 0.5, 0.6]);
    }

    #[test]
    fn depth_resize_maps() {
        let src: Vec<usize> = (0..48).collect();
        let out = depth_resize(&src, 96).unwrap();
        for (j, &v) in out.iter().enumerate() {
            assert_eq!(v, j / 2);
        }
        let src: Vec<usize> = (0..192).collect();
        let out = depth_resize(&src, 96).unwrap();
        assert!(out.iter().enumerate().all(|(j, &v)| v == 2 * j));
        let src: Vec<usize> = (0..7).collect();
        assert_eq!(depth_resize(&src, 7).unwrap(), src);
        assert!(matches!(depth_resize::<u8>(&[], 96), Err(Error::EmptyInput)));
    }

    #[test]
    fn flip_basics() {
        let img = ramp(4, 3);
        assert_eq!(img.flip(FlipSpec::IDENTITY), img);
        let h = img.flip(FlipSpec::new(true, false, false));
        assert_eq!(h.get(0, 0), img.get(0, 3));
        let v = img.flip(FlipSpec::new(false, true, false));
        assert_eq!(v.get(0, 1), img.get(2, 1));
        for s in FlipSpec::all() {
            assert_eq!(img.flip(s).flip(s), img);
        }
        let all = FlipSpec::all();
        assert_eq!(all[0], FlipSpec::IDENTITY);
        assert_eq!(all[1], FlipSpec::new(false, false, true));
        assert_eq!(all[4], FlipSpec::new(true, false, false));
    }

    #[test]
    fn depth_flip_reverses_slices() {
        let slices: Vec<_> = (0..3).map(|i| Image::filled(2, 2, i as f32 / 4.0).unwrap()).collect();
        let vol = Volume::new("p", slices, None).unwrap();
        let f = vol.flip(FlipSpec::new(false, false, true));
        assert_eq!(f.slices()[0].get(0, 0), 0.5);
        assert_eq!(f.flip(FlipSpec::new(false, false, true)), vol);
    }
}
