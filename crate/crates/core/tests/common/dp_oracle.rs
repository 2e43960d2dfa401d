fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Clusters kept as member lists; means recomputed from scratch each time.
pub fn naive(points: &[[f64; 2]], lambda: f64, init_n: usize, max_iter: usize) -> (Vec<[f64; 2]>, Vec<usize>, f64) {
    let mut centers: Vec<[f64; 2]> = vec![points[0]];
    while centers.len() < init_n {
        let dist: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq(*p, *c)).fold(f64::INFINITY, f64::min))
            .collect();
        let mut far = 0;
        for k in 1..points.len() {
            if dist[k] > dist[far] {
                far = k;
            }
        }
        if dist[far] <= lambda {
            break;
        }
        centers.push(points[far]);
    }

    let mut labels: Vec<usize> = vec![];
    for _ in 0..max_iter {
        let mut new_labels = vec![0; points.len()];
        for (k, p) in points.iter().enumerate() {
            let d: Vec<f64> = centers.iter().map(|c| sq(*p, *c)).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            if min > lambda {
                centers.push(*p);
                new_labels[k] = centers.len() - 1;
            } else {
                new_labels[k] = d.iter().position(|&x| x == min).unwrap();
            }
        }
        let mut members: Vec<Vec<usize>> = vec![vec![]; centers.len()];
        for (k, &l) in new_labels.iter().enumerate() {
            members[l].push(k);
        }
        let mut kept = vec![];
        let mut relabel = vec![None; centers.len()];
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            relabel[c] = Some(kept.len());
            let n = m.len() as f64;
            kept.push([
                m.iter().map(|&k| points[k][0]).sum::<f64>() / n,
                m.iter().map(|&k| points[k][1]).sum::<f64>() / n,
            ]);
        }
        centers = kept;
        let new_labels: Vec<usize> = new_labels.iter().map(|&l| relabel[l].unwrap()).collect();
        let stop = new_labels == labels;
        labels = new_labels;
        if stop {
            break;
        }
    }
    let cost = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq(*p, centers[l]))
        .sum::<f64>()
        + lambda * centers.len() as f64;
    (centers, labels, cost)
}
