//! Exact linear assignment.
//!
//! Costs are read through [`AssignmentCost`], so point-cloud problems never
//! materialise the n x n matrix; rows are evaluated one at a time into a
//! buffer. The solver is deterministic for a given input.

const NONE: usize = usize::MAX;
/// Final auction epsilon relative to the mean cost.
const EPS_FINAL: f64 = 1e-4;

/// Square cost matrix accessed lazily.
pub trait AssignmentCost {
    fn size(&self) -> usize;
    fn cost(&self, row: usize, col: usize) -> f64;

    /// Write the whole of row `row` into `out`.
    fn row_into(&self, row: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.cost(row, j);
        }
    }
}

/// Row-major dense matrix.
pub struct DenseCost<'a> {
    pub n: usize,
    pub values: &'a [f64],
}

impl AssignmentCost for DenseCost<'_> {
    fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn cost(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    fn row_into(&self, row: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.values[row * self.n..(row + 1) * self.n]);
    }
}

/// Squared Euclidean distance between rows of two equally sized point clouds.
pub struct SquaredEuclidean<'a> {
    n: usize,
    d: usize,
    a: &'a [f64],
    b: &'a [f64],
    // b stored coordinate-major for vectorised row evaluation
    b_t: Vec<f64>,
}

impl<'a> SquaredEuclidean<'a> {
    /// `a` and `b` are row-major `n x d` buffers.
    pub fn new(a: &'a [f64], b: &'a [f64], d: usize) -> Self {
        assert!(d > 0 && a.len() == b.len() && a.len() % d == 0);
        let n = a.len() / d;
        let mut b_t = vec![0.0; n * d];
        for j in 0..n {
            for k in 0..d {
                b_t[k * n + j] = b[j * d + k];
            }
        }
        SquaredEuclidean { n, d, a, b, b_t }
    }
}

impl AssignmentCost for SquaredEuclidean<'_> {
    fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn cost(&self, row: usize, col: usize) -> f64 {
        let x = &self.a[row * self.d..(row + 1) * self.d];
        let y = &self.b[col * self.d..(col + 1) * self.d];
        x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
    }

    fn row_into(&self, row: usize, out: &mut [f64]) {
        let n = self.n;
        let x = &self.a[row * self.d..(row + 1) * self.d];
        out.fill(0.0);
        for (k, &xk) in x.iter().enumerate() {
            let col = &self.b_t[k * n..(k + 1) * n];
            for (o, &y) in out.iter_mut().zip(col) {
                let t = xk - y;
                *o += t * t;
            }
        }
    }
}

/// Optimal assignment: `row_to_col[i]` is the column matched to row `i`.
///
/// Column prices are first brought close to optimal by an epsilon-scaling
/// auction. Each row is then matched to its cheapest column under those
/// prices when that column is still free, which leaves a partial matching
/// whose edges are all tight, and the remaining rows are inserted by
/// Dijkstra shortest augmenting paths (the Jonker-Volgenant augmentation).
/// The answer is exact whatever the quality of the auction prices; they only
/// shorten the paths.
pub fn solve<C: AssignmentCost + ?Sized>(c: &C) -> Vec<usize> {
    let n = c.size();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let mut buf = vec![0.0; n];
    let mut v: Vec<f64> = auction_prices(c, &mut buf).into_iter().map(|p| -p).collect();
    let mut rowsol = vec![NONE; n];
    let mut colsol = vec![NONE; n];
    let mut free: Vec<usize> = Vec::new();
    for i in 0..n {
        c.row_into(i, &mut buf);
        let mut best = f64::INFINITY;
        let mut jbest = 0;
        for (j, (cij, vj)) in buf.iter().zip(&v).enumerate() {
            let h = cij - vj;
            if h < best {
                best = h;
                jbest = j;
            }
        }
        if colsol[jbest] == NONE {
            colsol[jbest] = i;
            rowsol[i] = jbest;
        } else {
            free.push(i);
        }
    }

    let mut d = vec![0.0_f64; n];
    let mut pred = vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        c.row_into(freerow, &mut buf);
        for j in 0..n {
            d[j] = buf[j] - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        let mut low = 0usize;
        let mut up = 0usize;
        let mut min = 0.0;
        let endofpath;
        'search: loop {
            if up == low {
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if colsol[j] == NONE {
                        endofpath = j;
                        break 'search;
                    }
                }
            }
            let j1 = collist[low];
            low += 1;
            let i = colsol[j1];
            c.row_into(i, &mut buf);
            let h = buf[j1] - v[j1] - min;
            for k in up..n {
                let j = collist[k];
                let v2 = buf[j] - v[j] - h;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if colsol[j] == NONE {
                            endofpath = j;
                            break 'search;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
            }
        }
        // price update for scanned columns
        for &j1 in &collist[..low] {
            v[j1] += d[j1] - min;
        }
        let mut j = endofpath;
        loop {
            let i = pred[j];
            colsol[j] = i;
            let next = rowsol[i];
            rowsol[i] = j;
            j = next;
            if i == freerow {
                break;
            }
        }
    }
    rowsol
}

/// Column prices from a Gauss-Seidel forward auction with epsilon scaling.
/// Prices enter as `cost + price`. A phase that exceeds its bid budget ends
/// the run; the prices are still a valid warm start.
fn auction_prices<C: AssignmentCost + ?Sized>(c: &C, buf: &mut [f64]) -> Vec<f64> {
    let n = c.size();
    let mut prices = vec![0.0_f64; n];
    let stride = (n / 64).max(1);
    let mut scale = 0.0_f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..n).step_by(stride) {
        for j in (0..n).step_by(stride) {
            let h = c.cost(i, j).abs();
            scale = scale.max(h);
            total += h;
            count += 1;
        }
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return prices;
    }
    let eps_final = total / count as f64 * EPS_FINAL;
    let mut eps = scale / 4.0;
    let budget = 40 * n + 1000;
    let mut owner = vec![NONE; n];
    let mut queue: Vec<usize> = Vec::with_capacity(n);
    loop {
        owner.fill(NONE);
        queue.clear();
        queue.extend((0..n).rev());
        let mut bids = 0usize;
        while let Some(i) = queue.pop() {
            bids += 1;
            if bids > budget {
                return prices;
            }
            c.row_into(i, buf);
            let mut w1 = f64::INFINITY;
            let mut w2 = f64::INFINITY;
            let mut j1 = 0;
            for (j, (cij, p)) in buf.iter().zip(&prices).enumerate() {
                let w = cij + p;
                if w < w2 {
                    if w < w1 {
                        w2 = w1;
                        w1 = w;
                        j1 = j;
                    } else {
                        w2 = w;
                    }
                }
            }
            prices[j1] += (w2 - w1) + eps;
            let prev = std::mem::replace(&mut owner[j1], i);
            if prev != NONE {
                queue.push(prev);
            }
        }
        if eps <= eps_final {
            return prices;
        }
        eps = (eps / 6.0).max(eps_final);
    }
}

/// Total cost of an assignment.
pub fn assignment_cost<C: AssignmentCost + ?Sized>(c: &C, row_to_col: &[usize]) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| c.cost(i, j))
        .sum()
}
