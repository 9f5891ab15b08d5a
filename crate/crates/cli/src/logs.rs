//! CSV log emitters. One file per stream, fixed column order, header row
//! with units. Output is byte-identical across repeated runs with the same
//! inputs because values are printed with Rust's shortest round-trip float
//! formatting.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use wbc_core::scenario::RunLog;

pub fn emit(dir: &Path, log: &RunLog) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("states.csv"), states_csv(log))?;
    std::fs::write(dir.join("tasks.csv"), tasks_csv(log))?;
    std::fs::write(dir.join("forces.csv"), forces_csv(log))?;
    std::fs::write(dir.join("torques.csv"), torques_csv(log))?;
    std::fs::write(dir.join("estimator.csv"), estimator_csv(log))?;
    Ok(())
}

fn push_row(out: &mut String, t: f64, values: impl IntoIterator<Item = f64>) {
    let _ = write!(out, "{t}");
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn states_csv(log: &RunLog) -> String {
    let mut out = String::from("t_s,base_x_m,base_y_m,base_z_m,quat_x,quat_y,quat_z,quat_w");
    for i in 1..=12 {
        let _ = write!(out, ",q{i}_rad");
    }
    out.push_str(",vel_x_mps,vel_y_mps,vel_z_mps,omega_x_radps,omega_y_radps,omega_z_radps");
    for i in 1..=12 {
        let _ = write!(out, ",qd{i}_radps");
    }
    out.push('\n');
    for (i, &t) in log.time.iter().enumerate() {
        let row = log.positions[i].iter().chain(&log.velocities[i]).copied();
        push_row(&mut out, t, row);
    }
    out
}

fn tasks_csv(log: &RunLog) -> String {
    let mut out =
        String::from("t_s,frame,err_x_m,err_y_m,err_z_m,err_rx_rad,err_ry_rad,err_rz_rad\n");
    // Per-frame cursors; every stream is in time order, frames alphabetical.
    let mut cursors: Vec<(&String, usize)> =
        log.task_errors.keys().map(|k| (k, 0usize)).collect();
    for (i, &t) in log.time.iter().enumerate() {
        let _ = write!(out, "{t},base");
        for v in log.base_error[i] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        for (frame, cursor) in cursors.iter_mut() {
            let entries = &log.task_errors[*frame];
            if *cursor < entries.len() && entries[*cursor].0 == t {
                let _ = write!(out, "{t},{frame}");
                for v in entries[*cursor].1 {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
                *cursor += 1;
            }
        }
    }
    out
}

fn forces_csv(log: &RunLog) -> String {
    let mut out = String::from("t_s,frame,lambda_x_N,lambda_y_N,lambda_z_N\n");
    for (t, records) in &log.forces {
        for r in records {
            let _ = write!(
                out,
                "{t},{},{},{},{}\n",
                r.frame, r.force[0], r.force[1], r.force[2]
            );
        }
    }
    out
}

fn torques_csv(log: &RunLog) -> String {
    let mut out = String::from("t_s");
    for i in 1..=12 {
        let _ = write!(out, ",tau{i}_Nm");
    }
    out.push('\n');
    for (i, &t) in log.time.iter().enumerate() {
        push_row(&mut out, t, log.torques[i]);
    }
    out
}

fn estimator_csv(log: &RunLog) -> String {
    let mut out =
        String::from("t_s,fhat_x_N,fhat_y_N,fhat_z_N,that_x_Nm,that_y_Nm,that_z_Nm\n");
    for (t, est) in &log.estimate {
        let mut padded = [0.0; 6];
        for (k, v) in est.iter().take(6).enumerate() {
            padded[k] = *v;
        }
        push_row(&mut out, *t, padded);
    }
    out
}
