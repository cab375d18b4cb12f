//! Barnes–Hut quadtree for approximate all-pairs repulsion.
//!
//! The repulsion `k² δ / |δ|²` is, in complex notation, `k² conj(1 / (z - zⱼ))`,
//! so a cell's far field has the multipole expansion
//! `Σⱼ 1/(z - zⱼ) = Σₚ aₚ / w^(p+1)` with `w = z - c` and `aₚ = Σⱼ (zⱼ - c)^p`.
//! Cells store moments up to [`ORDER`] about their centre of mass (where
//! `a₁ = 0`); the opening criterion is the usual `width / distance < θ`.

use super::Vec2;

const MAX_DEPTH: u32 = 48;
/// Highest multipole moment kept per cell.
const ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default)]
struct Cx {
    re: f64,
    im: f64,
}

impl Cx {
    fn from(v: Vec2) -> Self {
        Cx { re: v.x, im: v.y }
    }

    fn mul(self, o: Cx) -> Cx {
        Cx {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    fn add(self, o: Cx) -> Cx {
        Cx {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }

    fn scale(self, s: f64) -> Cx {
        Cx {
            re: self.re * s,
            im: self.im * s,
        }
    }

    fn recip(self) -> Cx {
        let d = self.re * self.re + self.im * self.im;
        Cx {
            re: self.re / d,
            im: -self.im / d,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    center: Vec2,
    half: f64,
    mass: f64,
    com: Vec2,
    /// `moments[p - 2]` is `a_p` for `p` in `2..=ORDER`.
    moments: [Cx; ORDER - 1],
    /// Range into `QuadTree::order`.
    start: u32,
    end: u32,
    /// Index of the first of four children, or 0 for a leaf.
    children: u32,
}

pub struct QuadTree<'a> {
    points: &'a [Vec2],
    order: Vec<u32>,
    cells: Vec<Cell>,
}

impl<'a> QuadTree<'a> {
    pub fn build(points: &'a [Vec2]) -> Self {
        let mut tree = QuadTree {
            points,
            order: (0..points.len() as u32).collect(),
            cells: Vec::with_capacity(points.len() * 2),
        };
        if points.is_empty() {
            return tree;
        }
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let center = (lo + hi) * 0.5;
        let half = ((hi.x - lo.x).max(hi.y - lo.y) * 0.5).max(f64::MIN_POSITIVE) * (1.0 + 1e-9);
        tree.cells.push(Cell {
            center,
            half,
            mass: 0.0,
            com: Vec2::ZERO,
            moments: Default::default(),
            start: 0,
            end: points.len() as u32,
            children: 0,
        });
        tree.split(0, 0);
        tree
    }

    fn split(&mut self, cell: usize, depth: u32) {
        let Cell {
            center,
            half,
            start,
            end,
            ..
        } = self.cells[cell];
        let (s, e) = (start as usize, end as usize);
        let mut com = Vec2::ZERO;
        for &i in &self.order[s..e] {
            com += self.points[i as usize];
        }
        let mass = (e - s) as f64;
        let com = com * (1.0 / mass);
        let mut moments = [Cx::default(); ORDER - 1];
        for &i in &self.order[s..e] {
            let r = Cx::from(self.points[i as usize] - com);
            let mut pow = r;
            for m in moments.iter_mut() {
                pow = pow.mul(r);
                *m = m.add(pow);
            }
        }
        self.cells[cell].mass = mass;
        self.cells[cell].com = com;
        self.cells[cell].moments = moments;
        if e - s <= 1 || depth >= MAX_DEPTH {
            return;
        }

        // Partition into quadrants 0..4 ordered (x-, y-), (x+, y-), (x-, y+), (x+, y+).
        let points = self.points;
        let quadrant = |i: u32| {
            let p = points[i as usize];
            (p.x >= center.x) as usize | ((p.y >= center.y) as usize) << 1
        };
        let slice = &mut self.order[s..e];
        slice.sort_unstable_by_key(|&i| (quadrant(i), i));
        let mut bounds = [s; 5];
        let mut at = s;
        for q in 0..4 {
            bounds[q] = at;
            while at < e && quadrant(self.order[at]) == q {
                at += 1;
            }
        }
        bounds[4] = e;

        let first = self.cells.len();
        self.cells[cell].children = first as u32;
        let quarter = half * 0.5;
        for q in 0..4 {
            let dx = if q & 1 == 1 { quarter } else { -quarter };
            let dy = if q & 2 == 2 { quarter } else { -quarter };
            self.cells.push(Cell {
                center: Vec2::new(center.x + dx, center.y + dy),
                half: quarter,
                mass: 0.0,
                com: Vec2::ZERO,
                moments: Default::default(),
                start: bounds[q] as u32,
                end: bounds[q + 1] as u32,
                children: 0,
            });
        }
        for q in 0..4 {
            if self.cells[first + q].end > self.cells[first + q].start {
                self.split(first + q, depth + 1);
            }
        }
    }

    /// Repulsion on point `i`: sum of `k² δ / |δ|²`, with a cell's multipole
    /// expansion standing in for its points when `width / distance < theta`.
    /// Cells containing `i` are always opened; pairs closer than `eps` are skipped.
    pub fn repulsion(&self, i: usize, k2: f64, theta: f64, eps: f64) -> Vec2 {
        let mut force = Vec2::ZERO;
        if self.cells.is_empty() {
            return force;
        }
        let p = self.points[i];
        let theta2 = theta * theta;
        let eps2 = eps * eps;
        let mut stack = vec![0usize];
        while let Some(c) = stack.pop() {
            let cell = &self.cells[c];
            if cell.end == cell.start {
                continue;
            }
            if cell.children == 0 {
                for &j in &self.order[cell.start as usize..cell.end as usize] {
                    let j = j as usize;
                    if j == i {
                        continue;
                    }
                    let d = p - self.points[j];
                    let d2 = d.dot(d);
                    if d2 >= eps2 {
                        force += d * (k2 / d2);
                    }
                }
                continue;
            }
            let inside = (p.x - cell.center.x).abs() <= cell.half
                && (p.y - cell.center.y).abs() <= cell.half;
            let d = p - cell.com;
            let d2 = d.dot(d);
            let width = 2.0 * cell.half;
            if !inside && width * width < theta2 * d2 {
                let inv_w = Cx::from(d).recip();
                let mut term = inv_w;
                let mut sum = inv_w.scale(cell.mass);
                term = term.mul(inv_w);
                for m in &cell.moments {
                    term = term.mul(inv_w);
                    sum = sum.add(m.mul(term));
                }
                force += Vec2::new(sum.re, -sum.im) * k2;
            } else {
                let first = cell.children as usize;
                stack.extend(first..first + 4);
            }
        }
        force
    }
}
