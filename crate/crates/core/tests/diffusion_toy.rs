use keyvid_core::diffusion::toy::{sample_point, train_two_point};
use keyvid_core::diffusion::make_schedule;

#[test]
fn two_point_toy_samples_land_on_training_points() {
    let points = [[1.0f32, 0.5], [-0.5, -1.0]];
    let schedule = make_schedule(10, 0.01, 0.5).unwrap();
    let (model, ps) = train_two_point(points, &schedule, 1500, 64, 7).unwrap();
    let mut hits = 0;
    for seed in 0..50 {
        let p = sample_point(&model, &ps, &schedule, seed).unwrap();
        let d = points
            .iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .fold(f32::INFINITY, f32::min);
        if d < 0.1 {
            hits += 1;
        }
    }
    assert!(hits >= 45, "{hits}/50 samples within 0.1");
}
