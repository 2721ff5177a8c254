use nalgebra::Vector3;

pub(crate) const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
pub(crate) struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }
}

#[derive(Debug, Clone)]
pub(crate) enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

/// Axis-aligned bounding-volume hierarchy over triangles, median split on the
/// longest centroid axis.
#[derive(Debug, Clone)]
pub(crate) struct Bvh {
    pub nodes: Vec<Node>,
    /// Triangle indices in leaf order.
    pub order: Vec<usize>,
}

impl Bvh {
    pub fn build(triangles: &[[Vector3<f64>; 3]]) -> Self {
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let centroids: Vec<Vector3<f64>> = triangles
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        if !triangles.is_empty() {
            build_node(&mut nodes, &mut order, 0, triangles, &centroids);
        }
        Self { nodes, order }
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    offset: usize,
    triangles: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
) -> usize {
    let mut bounds = Aabb::empty();
    let mut centroid_bounds = Aabb::empty();
    for &t in order.iter() {
        for v in &triangles[t] {
            bounds.grow(v);
        }
        centroid_bounds.grow(&centroids[t]);
    }
    let index = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node {
            bounds,
            kind: NodeKind::Leaf {
                start: offset,
                count: order.len(),
            },
        });
        return index;
    }
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf { start: 0, count: 0 },
    });
    let extent = centroid_bounds.max - centroid_bounds.min;
    let axis = extent.imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, offset, triangles, centroids);
    let right = build_node(nodes, hi, offset + mid, triangles, centroids);
    nodes[index].kind = NodeKind::Inner { left, right };
    index
}
