use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge pixel (`[a b c] -> b [a b c] b`).
    Reflect,
}

/// Per-side padding. Even kernels use `Padding::same`, which puts the extra
/// row/column on the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl Padding {
    pub fn symmetric(pad: usize, mode: PadMode) -> Self {
        Self {
            top: pad,
            bottom: pad,
            left: pad,
            right: pad,
            mode,
        }
    }

    pub fn same(kernel: usize, mode: PadMode) -> Self {
        let before = (kernel - 1) / 2;
        let after = kernel - 1 - before;
        Self {
            top: before,
            bottom: after,
            left: before,
            right: after,
            mode,
        }
    }

    pub fn none() -> Self {
        Self::symmetric(0, PadMode::Zero)
    }

    fn max_pad(&self) -> usize {
        self.top.max(self.bottom).max(self.left).max(self.right)
    }
}

/// Geometry of one conv2d call, all sizes per image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn new(
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self, String> {
        if stride == 0 {
            return Err("stride must be positive".into());
        }
        if pad.mode == PadMode::Reflect && pad.max_pad() >= in_h.min(in_w) {
            return Err(format!(
                "reflection pad {} needs spatial size > pad, got {in_h}x{in_w}",
                pad.max_pad()
            ));
        }
        let ph = in_h + pad.top + pad.bottom;
        let pw = in_w + pad.left + pad.right;
        if ph < kernel || pw < kernel {
            return Err(format!("kernel {kernel} larger than padded input {ph}x{pw}"));
        }
        Ok(Self {
            in_ch,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
            pad,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `map[k * out + o]` is the source row (or column) feeding output `o`
    /// through kernel tap `k`, or `None` for a zero-padded position.
    fn index_map(&self, size: usize, out: usize, before: usize) -> Vec<Option<usize>> {
        let mut map = Vec::with_capacity(self.kernel * out);
        for k in 0..self.kernel {
            for o in 0..out {
                let p = (o * self.stride + k) as isize - before as isize;
                map.push(source_index(p, size, self.pad.mode));
            }
        }
        map
    }

    pub fn maps(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        (
            self.index_map(self.in_h, self.out_h, self.pad.top),
            self.index_map(self.in_w, self.out_w, self.pad.left),
        )
    }
}

fn source_index(p: isize, size: usize, mode: PadMode) -> Option<usize> {
    let n = size as isize;
    if (0..n).contains(&p) {
        return Some(p as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if p < 0 { -p } else { 2 * (n - 1) - p };
            Some(r as usize)
        }
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub(crate) fn im2col<T: Real>(
    g: &ConvGeom,
    maps: &(Vec<Option<usize>>, Vec<Option<usize>>),
    image: &[T],
    cols: &mut [T],
) {
    let (hmap, wmap) = maps;
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match hmap[ki * g.out_h + oh] {
                        None => dst_row.fill(T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                            let wm = &wmap[kj * g.out_w..(kj + 1) * g.out_w];
                            for (d, m) in dst_row.iter_mut().zip(wm) {
                                *d = match m {
                                    Some(iw) => src[*iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image,
/// folding reflected positions onto their sources.
pub(crate) fn col2im<T: Real>(
    g: &ConvGeom,
    maps: &(Vec<Option<usize>>, Vec<Option<usize>>),
    cols: &[T],
    image: &mut [T],
) {
    let (hmap, wmap) = maps;
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let Some(ih) = hmap[ki * g.out_h + oh] else {
                        continue;
                    };
                    let src_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    let wm = &wmap[kj * g.out_w..(kj + 1) * g.out_w];
                    let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                    for (s, m) in src_row.iter().zip(wm) {
                        if let Some(iw) = m {
                            dst[*iw] = dst[*iw] + *s;
                        }
                    }
                }
            }
        }
    }
}
