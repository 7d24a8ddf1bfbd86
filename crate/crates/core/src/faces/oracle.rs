//! Analytic measurements on rendered (or generated) portraits. Both oracles
//! segment the skin region by colour, so they tolerate moderate noise.

use serde::{Deserialize, Serialize};

use super::{lum, skin_like, wrinkle_pitch, CHEEK_INNER, CHEEK_OUTER, CHROMA_TOL, WRINKLE_SLOTS};
use crate::tensor::Tensor;

/// Bounds on the fraction of the image the face region may cover.
const MIN_FACE_AREA: f64 = 0.08;
const MAX_FACE_AREA: f64 = 0.7;
/// Cheek columns sampled by the age oracle, kept inside the rendered band.
const SAMPLE_INNER: f64 = CHEEK_INNER + 0.04;
const SAMPLE_OUTER: f64 = CHEEK_OUTER - 0.04;
const MIN_DIP: f64 = 0.05;

/// Luminance of a `[0,1]` RGB triple.
pub fn luminance(c: [f64; 3]) -> f64 {
    lum(c)
}

struct View<'a> {
    data: &'a [f32],
    size: usize,
}

impl<'a> View<'a> {
    fn new(img: &'a Tensor) -> Option<Self> {
        match *img.shape() {
            [3, h, w] if h == w && h >= 8 => Some(View { data: img.data(), size: h }),
            _ => None,
        }
    }

    fn px(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.size * self.size;
        let i = y * self.size + x;
        [0, 1, 2].map(|c| (self.data[c * p + i] as f64 + 1.0) / 2.0)
    }
}

/// Skin segmentation shared by both oracles.
struct Face {
    skin: [f64; 3],
    /// Filled horizontal span of the face region per row.
    spans: Vec<Option<(usize, usize)>>,
    member: Vec<bool>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn segment(view: &View) -> Option<Face> {
    let s = view.size;
    let sf = s as f64;
    let (y0, y1) = ((0.42 * sf) as usize, (0.50 * sf).ceil() as usize);
    let (x0, x1) = ((0.46 * sf) as usize, (0.54 * sf).ceil() as usize);
    let patch: Vec<[f64; 3]> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| view.px(x, y)).collect();
    let skin = [0, 1, 2].map(|c| median(patch.iter().map(|p| p[c]).collect()));
    if lum(skin) < 0.2 || skin[0] - skin[2] < 0.05 {
        return None;
    }
    // connected skin component grown from the patch centre
    let like: Vec<bool> = (0..s * s).map(|i| skin_like(view.px(i % s, i / s), skin, CHROMA_TOL)).collect();
    let seed = ((y0 + y1) / 2) * s + (x0 + x1) / 2;
    if !like[seed] {
        return None;
    }
    let mut comp = vec![false; s * s];
    let mut stack = vec![seed];
    comp[seed] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = (i % s, i / s);
        let mut visit = |j: usize| {
            if like[j] && !comp[j] {
                comp[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < s {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - s);
        }
        if y + 1 < s {
            visit(i + s);
        }
    }
    let spans: Vec<Option<(usize, usize)>> = (0..s)
        .map(|y| {
            let row = &comp[y * s..(y + 1) * s];
            let l = row.iter().position(|&b| b)?;
            let r = row.iter().rposition(|&b| b)?;
            Some((l, r))
        })
        .collect();
    let area: usize = spans.iter().flatten().map(|(l, r)| r - l + 1).sum();
    if (area as f64) < MIN_FACE_AREA * sf * sf || (area as f64) > MAX_FACE_AREA * sf * sf {
        return None;
    }
    Some(Face { skin, spans, member: comp })
}

/// Estimated age of a portrait from its cheek wrinkle lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeReading {
    pub age_years: f64,
    pub lines: usize,
}

/// Counts dark horizontal line segments on both cheeks below the face centre
/// and inverts the four-years-per-line rule. `None` when no face is found.
pub fn oracle_age(img: &Tensor) -> Option<AgeReading> {
    let view = View::new(img)?;
    let face = segment(&view)?;
    let s = view.size;
    let widest = face.spans.iter().flatten().map(|(l, r)| r - l + 1).max()?;
    let rows: Vec<usize> = (0..s).filter(|&y| face.spans[y].is_some_and(|(l, r)| r - l + 2 >= widest)).collect();
    let cy = (rows[0] + rows[rows.len() - 1]) as f64 / 2.0 + 0.5;
    let cx = rows.iter().map(|&y| face.spans[y].map_or(0.0, |(l, r)| (l + r + 1) as f64 / 2.0)).sum::<f64>()
        / rows.len() as f64;
    let ax = widest as f64 / 2.0;
    let pitch = wrinkle_pitch(s);
    let start = (cy.floor() as usize).saturating_sub(1);
    let end = (cy.floor() as usize + 2 + pitch * WRINKLE_SLOTS).min(s - 1);
    let skin_l = lum(face.skin);

    let mut dips = [Vec::new(), Vec::new()];
    for y in start..=end {
        for (side, out) in dips.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut n = 0;
            for x in 0..s {
                let off = (x as f64 + 0.5 - cx) / ax;
                let on_side = if side == 0 { off < 0.0 } else { off > 0.0 };
                if on_side && (SAMPLE_INNER..=SAMPLE_OUTER).contains(&off.abs()) && face.member[y * s + x] {
                    acc += lum(view.px(x, y));
                    n += 1;
                }
            }
            out.push(if n >= 2 { 1.0 - acc / n as f64 / skin_l } else { 0.0 });
        }
    }
    let max_dip = dips.iter().flatten().cloned().fold(0.0, f64::max);
    let threshold = MIN_DIP.max(0.4 * max_dip);
    let mut lines = 0;
    for side in &dips {
        let mut inside = false;
        for &d in side {
            let dark = d > threshold;
            if dark && !inside {
                lines += 1;
            }
            inside = dark;
        }
    }
    Some(AgeReading { age_years: 16.0 + 4.0 * lines.min(12) as f64, lines })
}

/// Age-invariant geometry and tone of a face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySignature {
    pub features: Vec<f64>,
}

/// Centroid and second moments of the face region, eye centroids and skin
/// tone, with lengths as fractions of the image side.
pub fn identity_signature(img: &Tensor) -> Option<IdentitySignature> {
    let view = View::new(img)?;
    let face = segment(&view)?;
    let s = view.size;
    let sf = s as f64;
    let cells: Vec<(f64, f64)> = face
        .spans
        .iter()
        .enumerate()
        .filter_map(|(y, sp)| sp.map(|(l, r)| (y, l, r)))
        .flat_map(|(y, l, r)| (l..=r).map(move |x| (x as f64 + 0.5, y as f64 + 0.5)))
        .collect();
    let n = cells.len() as f64;
    let mx = cells.iter().map(|c| c.0).sum::<f64>() / n;
    let my = cells.iter().map(|c| c.1).sum::<f64>() / n;
    let vxx = cells.iter().map(|c| (c.0 - mx).powi(2)).sum::<f64>() / n;
    let vyy = cells.iter().map(|c| (c.1 - my).powi(2)).sum::<f64>() / n;
    let vxy = cells.iter().map(|c| (c.0 - mx) * (c.1 - my)).sum::<f64>() / n;

    let dark = 0.5 * lum(face.skin);
    let mut eyes = [(0.0, 0.0, 0.0); 2];
    for (y, sp) in face.spans.iter().enumerate() {
        let Some((l, r)) = *sp else { continue };
        if y as f64 + 0.5 >= my {
            continue;
        }
        for x in l..=r {
            let w = dark - lum(view.px(x, y));
            if w > 0.0 {
                let e = &mut eyes[usize::from(x as f64 + 0.5 >= mx)];
                e.0 += w * (x as f64 + 0.5);
                e.1 += w * (y as f64 + 0.5);
                e.2 += w;
            }
        }
    }
    if eyes.iter().any(|e| e.2 <= 0.0) {
        return None;
    }
    let mut features = vec![mx / sf, my / sf, vxx.sqrt() / sf, vyy.sqrt() / sf, vxy / (sf * sf)];
    for e in eyes {
        features.push(e.0 / e.2 / sf);
        features.push(e.1 / e.2 / sf);
    }
    features.extend(face.skin);
    Some(IdentitySignature { features })
}

/// Euclidean distance between identity signatures; `None` if either face is
/// not detected.
pub fn oracle_identity_distance(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (sa, sb) = (identity_signature(a)?, identity_signature(b)?);
    Some(sa.features.iter().zip(&sb.features).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Verification confidence in `[0,100]` for distance `delta`.
pub fn confidence(delta: f64, delta0: f64) -> f64 {
    100.0 * (-delta / delta0).exp()
}

#[cfg(test)]
mod tests {
    use super::super::{render_face, sample_identity};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_renders_invert_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let id = sample_identity(&mut rng);
            for age in [16.0, 19.0, 27.5, 36.0, 44.0, 52.0, 60.0] {
                let r = oracle_age(&render_face(&id, age, 48).unwrap()).expect("face detected");
                let want = ((age - 16.0) / 4.0).round() as usize;
                assert_eq!(r.lines, want, "age {age} identity {id:?}");
            }
        }
    }

    #[test]
    fn blank_image_is_undetected() {
        assert!(oracle_age(&Tensor::zeros(&[3, 48, 48])).is_none());
        assert!(identity_signature(&Tensor::full(&[3, 48, 48], -1.0)).is_none());
    }

    #[test]
    fn identity_distance_is_symmetric_and_zero_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (sample_identity(&mut rng), sample_identity(&mut rng));
        let (ia, ib) = (render_face(&a, 25.0, 48).unwrap(), render_face(&b, 25.0, 48).unwrap());
        assert_eq!(oracle_identity_distance(&ia, &ia), Some(0.0));
        assert_eq!(oracle_identity_distance(&ia, &ib), oracle_identity_distance(&ib, &ia));
        assert!(oracle_identity_distance(&ia, &ib).unwrap() > 0.0);
    }

    #[test]
    fn confidence_mapping() {
        assert_eq!(confidence(0.0, 0.3), 100.0);
        assert!(confidence(0.1, 0.3) > confidence(0.2, 0.3));
    }
}
