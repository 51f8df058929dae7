use vartrack::geometry::KinematicState;
use vartrack::sim::{ctrv_trajectory, ControlSegment};

fn half_segments(hold: f64, ramp: f64, steps: usize) -> Vec<ControlSegment> {
    let mut segs = vec![ControlSegment { duration: hold, v: 8.0, omega: 1.0 }];
    let step = ramp / steps as f64;
    for k in 0..steps {
        let frac = (k as f64 + 0.5) / steps as f64;
        segs.push(ControlSegment { duration: step, v: 8.0, omega: 1.0 - 2.0 * frac });
    }
    segs
}

fn residual(hold: f64, ramp: f64) -> f64 {
    let start = KinematicState { x: 0.0, y: 0.0, phi: 0.0, v: 8.0, omega: 1.0 };
    let traj = ctrv_trajectory(start, &half_segments(hold, ramp, 40), 0.0125);
    let end = traj.last().unwrap();
    let gamma = end.y.atan2(end.x);
    let mut g = hold - std::f64::consts::PI - 2.0 * gamma;
    while g > std::f64::consts::PI { g -= std::f64::consts::TAU; }
    while g < -std::f64::consts::PI { g += std::f64::consts::TAU; }
    g
}

fn full_check(hold: f64, ramp: f64, phi0: f64, x0: f64) {
    let mut segs = Vec::new();
    let mut sign = 1.0;
    segs.push(ControlSegment { duration: 0.5 * hold, v: 8.0, omega: sign });
    let mut t = 0.5 * hold;
    while t < 130.0 {
        let steps = 40;
        let step = ramp / steps as f64;
        for k in 0..steps {
            let frac = (k as f64 + 0.5) / steps as f64;
            segs.push(ControlSegment { duration: step, v: 8.0, omega: sign * (1.0 - 2.0 * frac) });
        }
        t += ramp;
        sign = -sign;
        segs.push(ControlSegment { duration: hold, v: 8.0, omega: sign });
        t += hold;
    }
    let start = KinematicState { x: x0, y: 0.0, phi: phi0, v: 8.0, omega: 1.0 };
    let traj = ctrv_trajectory(start, &segs, 0.0125);
    let n = ((120.0 / 0.0125) as usize).min(traj.len() - 1);
    let (mut rmax, mut rmin) = (0.0f64, f64::INFINITY);
    for k in traj.iter().take(n + 1) {
        let r = k.x.hypot(k.y);
        rmax = rmax.max(r);
        rmin = rmin.min(r);
    }
    println!("hold {hold:.5} ramp {ramp} phi0 {phi0:.3} x0 {x0}: rmax {rmax:.1} rmin {rmin:.1}");
}

fn main() {
    let ramp = 2.0;
    let (mut lo, mut hi) = (10.5, 12.5);
    let mut glo = residual(lo, ramp);
    println!("g({lo}) = {glo:.3}, g({hi}) = {:.3}", residual(hi, ramp));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let gm = residual(mid, ramp);
        if (gm > 0.0) == (glo > 0.0) { lo = mid; glo = gm; } else { hi = mid; }
    }
    let hold = 0.5 * (lo + hi);
    println!("solved hold = {hold:.6} residual {:.2e}", residual(hold, ramp));
    full_check(hold, ramp, 0.0, 20.0);
    full_check(hold, ramp, std::f64::consts::FRAC_PI_2, 20.0);
    full_check(hold, ramp, 0.0, 24.0);
    full_check(hold, ramp, -0.3, 22.0);
}
