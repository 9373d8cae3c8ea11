//! Convex hulls with exact orientation predicates.

use std::collections::{HashMap, VecDeque};

use robust::{orient2d, orient3d, Coord, Coord3D};

use crate::error::{Error, Result};

pub type P3 = [f64; 3];

#[inline]
fn c3(p: P3) -> Coord3D<f64> {
    Coord3D {
        x: p[0],
        y: p[1],
        z: p[2],
    }
}

#[inline]
pub(crate) fn c2(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Negative when `d` is strictly outside the face `(a, b, c)` oriented
/// counterclockwise as seen from outside.
#[inline]
fn side(pts: &[P3], f: [usize; 3], d: usize) -> f64 {
    orient3d(c3(pts[f[0]]), c3(pts[f[1]]), c3(pts[f[2]]), c3(pts[d]))
}

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: P3, b: P3) -> P3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct Face {
    v: [usize; 3],
    normal: P3,
    outside: Vec<usize>,
    alive: bool,
}

/// Triangulated boundary of the convex hull of `pts`, faces oriented
/// counterclockwise when seen from outside.
pub fn convex_hull_3d(pts: &[P3]) -> Result<Vec<[usize; 3]>> {
    let n = pts.len();
    if n < 4 {
        return Err(Error::DegenerateHull(format!("{n} points")));
    }
    // initial simplex from extreme points
    let (mut i0, mut i1) = (0, 0);
    for i in 0..n {
        if pts[i] < pts[i0] {
            i0 = i;
        }
        if pts[i] > pts[i1] {
            i1 = i;
        }
    }
    if pts[i0] == pts[i1] {
        return Err(Error::DegenerateHull("all points coincide".into()));
    }
    let dir = sub(pts[i1], pts[i0]);
    let mut i2 = usize::MAX;
    let mut best = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let c = cross(dir, sub(*p, pts[i0]));
        let d = dot(c, c);
        if d > best {
            best = d;
            i2 = i;
        }
    }
    if i2 == usize::MAX {
        return Err(Error::DegenerateHull("all points collinear".into()));
    }
    let mut i3 = usize::MAX;
    let mut best = 0.0;
    for i in 0..n {
        let o = orient3d(c3(pts[i0]), c3(pts[i1]), c3(pts[i2]), c3(pts[i])).abs();
        if o > best {
            best = o;
            i3 = i;
        }
    }
    if i3 == usize::MAX {
        return Err(Error::DegenerateHull("all points coplanar".into()));
    }
    let mut faces: Vec<Face> = Vec::new();
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    let make = |v: [usize; 3]| Face {
        v,
        normal: cross(sub(pts[v[1]], pts[v[0]]), sub(pts[v[2]], pts[v[0]])),
        outside: Vec::new(),
        alive: true,
    };
    let tetra = if orient3d(c3(pts[i0]), c3(pts[i1]), c3(pts[i2]), c3(pts[i3])) > 0.0 {
        // i3 below (i0, i1, i2): that face already faces away from i3
        [[i0, i1, i2], [i0, i3, i1], [i1, i3, i2], [i2, i3, i0]]
    } else {
        [[i0, i2, i1], [i0, i1, i3], [i1, i2, i3], [i2, i0, i3]]
    };
    for v in tetra {
        let id = faces.len();
        for e in 0..3 {
            edges.insert((v[e], v[(e + 1) % 3]), id);
        }
        faces.push(make(v));
    }
    let simplex = [i0, i1, i2, i3];
    for p in 0..n {
        if simplex.contains(&p) {
            continue;
        }
        for f in faces.iter_mut() {
            if side(pts, f.v, p) < 0.0 {
                f.outside.push(p);
                break;
            }
        }
    }
    let mut pending: Vec<usize> = (0..4).filter(|&i| !faces[i].outside.is_empty()).collect();
    while let Some(fid) = pending.pop() {
        if !faces[fid].alive || faces[fid].outside.is_empty() {
            continue;
        }
        let f = &faces[fid];
        let a = pts[f.v[0]];
        let eye = *f
            .outside
            .iter()
            .max_by(|&&p, &&q| {
                dot(f.normal, sub(pts[p], a))
                    .total_cmp(&dot(f.normal, sub(pts[q], a)))
                    .then(q.cmp(&p))
            })
            .expect("nonempty");
        // visible region by flood fill
        let mut visible = vec![fid];
        let mut seen: HashMap<usize, bool> = HashMap::new();
        seen.insert(fid, true);
        let mut queue = VecDeque::from([fid]);
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        while let Some(g) = queue.pop_front() {
            let v = faces[g].v;
            for e in 0..3 {
                let (p, q) = (v[e], v[(e + 1) % 3]);
                let nb = *edges.get(&(q, p)).expect("closed surface");
                let vis = *seen.entry(nb).or_insert_with(|| side(pts, faces[nb].v, eye) < 0.0);
                if vis {
                    if !visible.contains(&nb) {
                        visible.push(nb);
                        queue.push_back(nb);
                    }
                } else {
                    horizon.push((p, q));
                }
            }
        }
        let mut orphans = Vec::new();
        for &g in &visible {
            let v = faces[g].v;
            for e in 0..3 {
                edges.remove(&(v[e], v[(e + 1) % 3]));
            }
            faces[g].alive = false;
            orphans.append(&mut faces[g].outside);
        }
        let first_new = faces.len();
        for &(p, q) in &horizon {
            let v = [p, q, eye];
            let id = faces.len();
            for e in 0..3 {
                edges.insert((v[e], v[(e + 1) % 3]), id);
            }
            faces.push(make(v));
        }
        for p in orphans {
            if p == eye {
                continue;
            }
            for id in first_new..faces.len() {
                if side(pts, faces[id].v, p) < 0.0 {
                    faces[id].outside.push(p);
                    break;
                }
            }
        }
        for id in first_new..faces.len() {
            if !faces[id].outside.is_empty() {
                pending.push(id);
            }
        }
    }
    Ok(faces.into_iter().filter(|f| f.alive).map(|f| f.v).collect())
}

/// Indices of the upper hull of `(x_i, y_i)`, left to right; `xs` must be
/// sorted ascending.
pub fn upper_hull_1d(xs: &[f64], ys: &[f64]) -> Result<Vec<usize>> {
    if xs.len() < 2 {
        return Err(Error::DegenerateHull(format!("{} points", xs.len())));
    }
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b unless it is strictly above the chord a -> i
            if orient2d(c2([xs[a], ys[a]]), c2([xs[b], ys[b]]), c2([xs[i], ys[i]])) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    Ok(hull)
}
