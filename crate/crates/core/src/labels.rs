use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids for a batch, `N x H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "labels",
                format!("{n}x{h}x{w} needs {} entries, got {}", n * h * w, data.len()),
            ));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, n: usize) -> &[u8] {
        &self.data[n * self.h * self.w..(n + 1) * self.h * self.w]
    }

    /// Checks that every entry is below `classes` or equal to [`IGNORE`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE && v as usize >= classes {
                let plane = self.h * self.w;
                return Err(Error::Label {
                    value: v,
                    n: i / plane,
                    y: (i % plane) / self.w,
                    x: i % self.w,
                    classes,
                });
            }
        }
        Ok(())
    }

    pub fn stack(maps: &[LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("stack of zero label maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("labels", "label maps differ in extent"));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(self.w).zip(self.data.chunks(self.w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}
