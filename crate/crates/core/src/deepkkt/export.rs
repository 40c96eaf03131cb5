//! DSV set container, PPM grids and trace CSV.

use std::path::Path;

use dsv_autograd::Tensor;

use super::{alive, DsvCandidate, TraceRow};
use crate::container::Container;
use crate::error::{Error, Result};

pub const DSV_MAGIC: [u8; 4] = *b"DSVX";

/// Alive candidates with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DsvSet {
    /// Free-form `key = value` echo of the producing configuration.
    pub header: String,
    pub feature_shape: Vec<usize>,
    pub candidates: Vec<DsvCandidate>,
}

impl DsvSet {
    /// Keeps the alive candidates only.
    pub fn new(header: impl Into<String>, feature_shape: &[usize], candidates: &[DsvCandidate]) -> Result<Self> {
        let kept: Vec<DsvCandidate> = alive(candidates).cloned().collect();
        if let Some(c) = kept.iter().find(|c| c.x.shape() != feature_shape) {
            return Err(Error::ShapeMismatch(format!("candidate {:?} in a set of {feature_shape:?}", c.x.shape())));
        }
        Ok(DsvSet {
            header: header.into(),
            feature_shape: feature_shape.to_vec(),
            candidates: kept,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Highest-λ candidate of each class; ties keep the earlier one.
    pub fn top_per_class(&self, classes: usize) -> Result<Vec<DsvCandidate>> {
        (0..classes)
            .map(|k| {
                self.candidates
                    .iter()
                    .filter(|c| c.y == k)
                    .fold(None::<&DsvCandidate>, |best, c| match best {
                        Some(b) if b.lambda >= c.lambda => Some(b),
                        _ => Some(c),
                    })
                    .cloned()
                    .ok_or(Error::MissingClass(k))
            })
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.candidates.len();
        let mut shape = vec![n];
        shape.extend_from_slice(&self.feature_shape);
        let x: Vec<f64> = self.candidates.iter().flat_map(|c| c.x.data().iter().copied()).collect();
        let mut out = Container::new(DSV_MAGIC, self.header.clone());
        out.push("x", Tensor::new(&shape, x)?);
        out.push("y", Tensor::new(&[n], self.candidates.iter().map(|c| c.y as f64).collect())?);
        out.push("lambda", Tensor::new(&[n], self.candidates.iter().map(|c| c.lambda).collect())?);
        Ok(out)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let x = c.get("x")?;
        let y = c.get("y")?;
        let lambda = c.get("lambda")?;
        let n = x.shape().first().copied().ok_or_else(|| Error::Malformed("scalar x in DSV set".into()))?;
        if y.shape() != [n] || lambda.shape() != [n] {
            return Err(Error::Malformed(format!("{n} samples with y {:?} and lambda {:?}", y.shape(), lambda.shape())));
        }
        let feature_shape = x.shape()[1..].to_vec();
        let per: usize = feature_shape.iter().product();
        let mut candidates = Vec::with_capacity(n);
        for i in 0..n {
            let label = y.data()[i];
            if !(label >= 0.0 && label.fract() == 0.0) {
                return Err(Error::Malformed(format!("label {label}")));
            }
            let xi = Tensor::new(&feature_shape, x.data()[i * per..(i + 1) * per].to_vec())?;
            candidates.push(DsvCandidate::new(xi, label as usize, lambda.data()[i]));
        }
        Ok(DsvSet {
            header: c.header.clone(),
            feature_shape,
            candidates,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, DSV_MAGIC)?)
    }
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM of the alive candidates. Images are tiled one class per row;
/// 2-D points are drawn as a scatter plot coloured by class.
pub fn render_grid(candidates: &[DsvCandidate], classes: usize) -> Result<Vec<u8>> {
    let kept: Vec<&DsvCandidate> = alive(candidates).collect();
    let Some(first) = kept.first() else {
        return Ok(ppm(1, 1, &[0, 0, 0]));
    };
    match first.x.shape() {
        &[c, h, w] => {
            let scale = (32 / h.max(1)).max(1);
            let (ch, cw) = (h * scale, w * scale);
            let cols = (0..classes).map(|k| kept.iter().filter(|d| d.y == k).count()).max().unwrap_or(0).max(1);
            let gap = 1;
            let width = cols * (cw + gap) + gap;
            let height = classes * (ch + gap) + gap;
            let mut px = vec![128u8; width * height * 3];
            for k in 0..classes {
                for (j, d) in kept.iter().filter(|d| d.y == k).enumerate() {
                    let data = d.x.data();
                    let (oy, ox) = (gap + k * (ch + gap), gap + j * (cw + gap));
                    for yy in 0..ch {
                        for xx in 0..cw {
                            let (sy, sx) = (yy / scale, xx / scale);
                            let at = |ci: usize| byte(data[(ci * h + sy) * w + sx]);
                            let rgb = if c == 3 { [at(0), at(1), at(2)] } else { [at(0); 3] };
                            let o = ((oy + yy) * width + ox + xx) * 3;
                            px[o..o + 3].copy_from_slice(&rgb);
                        }
                    }
                }
            }
            Ok(ppm(width, height, &px))
        }
        &[2] => {
            let size = 256usize;
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for d in &kept {
                for a in 0..2 {
                    lo[a] = lo[a].min(d.x.data()[a]);
                    hi[a] = hi[a].max(d.x.data()[a]);
                }
            }
            let mut px = vec![255u8; size * size * 3];
            for d in &kept {
                let pos: Vec<usize> = (0..2)
                    .map(|a| {
                        let span = (hi[a] - lo[a]).max(1e-12);
                        (8.0 + (d.x.data()[a] - lo[a]) / span * (size - 17) as f64).round() as usize
                    })
                    .collect();
                let colour = PALETTE[d.y % PALETTE.len()];
                let (cx, cy) = (pos[0], size - 1 - pos[1]);
                for yy in cy - 2..=cy + 2 {
                    for xx in cx - 2..=cx + 2 {
                        let o = (yy * size + xx) * 3;
                        px[o..o + 3].copy_from_slice(&colour);
                    }
                }
            }
            Ok(ppm(size, size, &px))
        }
        other => Err(Error::ShapeMismatch(format!("cannot render candidates of shape {other:?}"))),
    }
}

/// Parses a binary PPM; returns `(width, height, rgb bytes)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::BadMagic {
            expected: "P6".into(),
            found: fields[0].clone(),
        });
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Malformed(format!("PPM maxval {max}")));
    }
    pos += 1;
    let need = w * h * 3;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < need {
        return Err(Error::Truncated("PPM pixels"));
    }
    if data.len() > need {
        return Err(Error::Malformed("trailing bytes after PPM pixels".into()));
    }
    Ok((w, h, data.to_vec()))
}

pub const TRACE_HEADER: &str = "iteration,l_primal,l_stat,l_total,mean_entropy,alive,min_lambda,all_correct";

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.primal,
            r.stationarity,
            r.total,
            r.mean_entropy,
            r.alive,
            r.min_lambda,
            u8::from(r.all_correct)
        ));
    }
    out
}

/// Leading `#` lines (a config echo) are skipped.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::Malformed("trace CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Malformed(format!("trace row {line:?}")));
            }
            let bad = || Error::Malformed(format!("trace row {line:?}"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(TraceRow {
                iteration: int(f[0])?,
                primal: num(f[1])?,
                stationarity: num(f[2])?,
                total: num(f[3])?,
                mean_entropy: num(f[4])?,
                alive: int(f[5])?,
                min_lambda: num(f[6])?,
                all_correct: match f[7] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(v: f64, y: usize, lambda: f64) -> DsvCandidate {
        DsvCandidate::new(Tensor::full(&[1, 4, 4], v).unwrap(), y, lambda)
    }

    #[test]
    fn set_round_trip_drops_dead() {
        let mut cands = vec![image(0.25, 0, 0.5), image(0.75, 1, 0.125), image(0.5, 1, 0.3)];
        cands[2].alive = false;
        let set = DsvSet::new("seed = 1\n", &[1, 4, 4], &cands).unwrap();
        assert_eq!(set.len(), 2);
        let bytes = set.to_bytes().unwrap();
        let back = DsvSet::from_container(&Container::from_bytes(&bytes, DSV_MAGIC).unwrap()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(set.top_per_class(3), Err(Error::MissingClass(2))));
    }

    #[test]
    fn empty_set_keeps_shape() {
        let set = DsvSet::new("", &[2], &[]).unwrap();
        let back = DsvSet::from_container(&set.to_container().unwrap()).unwrap();
        assert_eq!(back.feature_shape, vec![2]);
        assert!(back.is_empty());
    }

    #[test]
    fn grid_layout() {
        let cands = vec![image(0.0, 0, 0.1), image(1.0, 0, 0.1), image(0.5, 1, 0.1)];
        let (w, h, px) = read_ppm(&render_grid(&cands, 2).unwrap()).unwrap();
        // 4×4 cells scaled ×8, two columns, two rows, 1px gutters
        assert_eq!((w, h), (2 * 33 + 1, 2 * 33 + 1));
        let at = |x: usize, y: usize| px[(y * w + x) * 3];
        assert_eq!(at(1, 1), 0);
        assert_eq!(at(34, 1), 255);
        assert_eq!(at(1, 34), 128);
    }

    #[test]
    fn scatter_for_points() {
        let cands = vec![
            DsvCandidate::new(Tensor::vector(vec![0.0, 0.0]).unwrap(), 0, 0.1),
            DsvCandidate::new(Tensor::vector(vec![1.0, 2.0]).unwrap(), 1, 0.1),
        ];
        let (w, h, _) = read_ppm(&render_grid(&cands, 2).unwrap()).unwrap();
        assert_eq!((w, h), (256, 256));
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(read_ppm(b"P5\n1 1\n255\n\0"), Err(Error::BadMagic { .. })));
        assert!(matches!(read_ppm(b"P6\n2 1\n255\n\0\0\0"), Err(Error::Truncated(_))));
        assert!(read_ppm(b"P6 # c\n1 1\n255\n\x01\x02\x03").is_ok());
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            TraceRow {
                iteration: 0,
                primal: 0.1 + 0.2,
                stationarity: 1e-300,
                total: 3.0,
                mean_entropy: std::f64::consts::LN_2,
                alive: 4,
                min_lambda: 0.0625,
                all_correct: false,
            },
            TraceRow {
                iteration: 1,
                primal: 0.0,
                stationarity: 2.5,
                total: 0.25,
                mean_entropy: 0.5,
                alive: 3,
                min_lambda: f64::INFINITY,
                all_correct: true,
            },
        ];
        let text = trace_to_csv(&rows);
        assert_eq!(parse_trace_csv(&text).unwrap(), rows);
        assert!(parse_trace_csv("iteration\n").is_err());
    }
}
