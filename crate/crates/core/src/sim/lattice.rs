use crate::algebra::Vec3;

/// `n` nearly evenly spaced points on a sphere of the given radius.
pub fn fibonacci_lattice(n: usize, radius: f64) -> Vec<Vec3> {
    if n == 1 {
        return vec![Vec3::new(0.0, 0.0, radius)];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z) * radius
        })
        .collect()
}

/// Square grid in the plane `x = distance`, centred on the x axis.
pub fn plane_grid(n: usize, distance: f64, spacing: f64) -> Vec<Vec3> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let y0 = -0.5 * (cols - 1) as f64 * spacing;
    let z0 = -0.5 * (rows - 1) as f64 * spacing;
    (0..n).map(|k| Vec3::new(distance, y0 + (k % cols) as f64 * spacing, z0 + (k / cols) as f64 * spacing)).collect()
}
