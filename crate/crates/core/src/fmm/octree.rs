//! Uniform octree over a cubic cell with periodic or open neighbourhoods.

/// A box index at some level together with the image shift (in cell
/// lengths) under which it is seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxRef {
    pub index: usize,
    pub shift: [i32; 3],
}

/// Interaction-list entry: source box, its image shift, and the integer
/// offset `target - source` in units of the level's box width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FarRef {
    pub source: BoxRef,
    pub offset: [i32; 3],
}

#[derive(Clone, Debug)]
pub struct Octree {
    depth: usize,
    box_length: f64,
    periodic: bool,
    /// Leaf index of every particle, input order.
    leaf_of: Vec<usize>,
    /// Particle indices grouped by leaf, canonical order inside each leaf.
    order: Vec<usize>,
    /// `leaf_start[b]..leaf_start[b+1]` slices `order`.
    leaf_start: Vec<usize>,
    /// Per level, whether any particle lies below each box.
    occupied: Vec<Vec<bool>>,
}

#[inline]
pub fn side(level: usize) -> usize {
    1 << level
}

#[inline]
pub fn box_count(level: usize) -> usize {
    1 << (3 * level)
}

#[inline]
pub fn coords(level: usize, index: usize) -> [i64; 3] {
    let n = side(level);
    [(index % n) as i64, ((index / n) % n) as i64, (index / (n * n)) as i64]
}

#[inline]
pub fn index_of(level: usize, c: [i64; 3]) -> usize {
    let n = side(level) as i64;
    (c[0] + n * (c[1] + n * c[2])) as usize
}

impl Octree {
    /// Builds the tree. Positions must already lie inside `[0, box_length)³`.
    pub fn new(positions: &[[f64; 3]], box_length: f64, depth: usize, periodic: bool) -> Self {
        let n = side(depth);
        let w = box_length / n as f64;
        let leaf_of: Vec<usize> = positions
            .iter()
            .map(|p| {
                let c = p.map(|x| ((x / w).floor() as i64).clamp(0, n as i64 - 1));
                index_of(depth, c)
            })
            .collect();
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by(|&a, &b| {
            let ka = (leaf_of[a], positions[a].map(f64::to_bits));
            let kb = (leaf_of[b], positions[b].map(f64::to_bits));
            ka.cmp(&kb).then(a.cmp(&b))
        });
        let nleaf = box_count(depth);
        let mut leaf_start = vec![0usize; nleaf + 1];
        for &l in &leaf_of {
            leaf_start[l + 1] += 1;
        }
        for b in 0..nleaf {
            leaf_start[b + 1] += leaf_start[b];
        }
        let mut occupied = vec![Vec::new(); depth + 1];
        occupied[depth] = (0..nleaf).map(|b| leaf_start[b + 1] > leaf_start[b]).collect();
        for level in (0..depth).rev() {
            let mut occ = vec![false; box_count(level)];
            for (child, &o) in occupied[level + 1].iter().enumerate() {
                if o {
                    occ[parent(level + 1, child)] = true;
                }
            }
            occupied[level] = occ;
        }
        Self { depth, box_length, periodic, leaf_of, order, leaf_start, occupied }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn box_length(&self) -> f64 {
        self.box_length
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn width(&self, level: usize) -> f64 {
        self.box_length / side(level) as f64
    }

    pub fn center(&self, level: usize, index: usize) -> [f64; 3] {
        let w = self.width(level);
        coords(level, index).map(|c| (c as f64 + 0.5) * w)
    }

    pub fn leaf_of(&self, particle: usize) -> usize {
        self.leaf_of[particle]
    }

    /// Particles of a leaf in canonical order.
    pub fn leaf_particles(&self, leaf: usize) -> &[usize] {
        &self.order[self.leaf_start[leaf]..self.leaf_start[leaf + 1]]
    }

    /// All particles, grouped by leaf.
    pub fn canonical_order(&self) -> &[usize] {
        &self.order
    }

    pub fn leaf_range(&self, leaf: usize) -> std::ops::Range<usize> {
        self.leaf_start[leaf]..self.leaf_start[leaf + 1]
    }

    pub fn occupied(&self, level: usize, index: usize) -> bool {
        self.occupied[level][index]
    }

    /// Resolves an unwrapped integer box coordinate to a box and image
    /// shift, or `None` outside the cell in open mode.
    fn resolve(&self, level: usize, g: [i64; 3]) -> Option<BoxRef> {
        let n = side(level) as i64;
        if self.periodic {
            let c = g.map(|v| v.rem_euclid(n));
            let shift = g.map(|v| v.div_euclid(n) as i32);
            Some(BoxRef { index: index_of(level, c), shift })
        } else if g.iter().all(|&v| (0..n).contains(&v)) {
            Some(BoxRef { index: index_of(level, g), shift: [0; 3] })
        } else {
            None
        }
    }

    /// The box itself and its 26 neighbours (fewer at open edges), each with
    /// its image shift.
    pub fn neighbors(&self, level: usize, index: usize) -> Vec<BoxRef> {
        let c = coords(level, index);
        let mut out = Vec::with_capacity(27);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(r) = self.resolve(level, [c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.push(r);
                    }
                }
            }
        }
        out
    }

    /// Children of the parent's neighbours that are not adjacent to the box
    /// (at most 189 entries). Empty at level 0.
    pub fn interaction_list(&self, level: usize, index: usize) -> Vec<FarRef> {
        if level == 0 {
            return Vec::new();
        }
        let c = coords(level, index);
        let pc = c.map(|v| v.div_euclid(2));
        let mut out = Vec::with_capacity(189);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let q = [pc[0] + dx, pc[1] + dy, pc[2] + dz];
                    for ch in 0..8 {
                        let g = [2 * q[0] + (ch & 1), 2 * q[1] + ((ch >> 1) & 1), 2 * q[2] + ((ch >> 2) & 1)];
                        let o = [c[0] - g[0], c[1] - g[1], c[2] - g[2]];
                        if o.iter().all(|v| v.abs() <= 1) {
                            continue;
                        }
                        if let Some(source) = self.resolve(level, g) {
                            out.push(FarRef { source, offset: o.map(|v| v as i32) });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Parent index one level up.
pub fn parent(level: usize, index: usize) -> usize {
    let c = coords(level, index);
    index_of(level - 1, c.map(|v| v / 2))
}

/// The eight children one level down.
pub fn children(level: usize, index: usize) -> [usize; 8] {
    let c = coords(level, index);
    let mut out = [0; 8];
    for (ch, o) in out.iter_mut().enumerate() {
        let g = [2 * c[0] + (ch as i64 & 1), 2 * c[1] + ((ch as i64 >> 1) & 1), 2 * c[2] + ((ch as i64 >> 2) & 1)];
        *o = index_of(level + 1, g);
    }
    out
}
