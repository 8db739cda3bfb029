//! CSV metric-log formats shared by the trainers and the CLI.
//!
//! Files contain no timestamps or host information, so a rerun with the
//! same config and seed reproduces them byte-for-byte.

use std::fmt::Write as _;

use crate::classify::ProbeLogRow;
use crate::detect::DetectLogRow;
use crate::manifest::CATEGORY_NAMES;
use crate::mim::PretrainLogRow;

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.9e}")
    }
}

pub fn pretrain_csv(rows: &[PretrainLogRow]) -> String {
    let mut out = String::from("epoch,mean_loss,eval_mse,eval_psnr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            fmt_f64(r.mean_loss),
            fmt_f64(r.eval_mse),
            fmt_f64(r.eval_psnr)
        );
    }
    out
}

pub fn detect_csv(rows: &[DetectLogRow]) -> String {
    let mut out = String::from(
        "epoch,phase,lambda,encoder_lr,train_loss,l_sup,l_cons,val_map_0.10,val_map_0.25,val_map_0.50,val_map_0.75\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            fmt_f64(r.lambda),
            fmt_f64(r.encoder_lr),
            fmt_f64(r.train_loss),
            fmt_f64(r.l_sup),
            fmt_f64(r.l_cons),
            fmt_f64(r.val_map[0]),
            fmt_f64(r.val_map[1]),
            fmt_f64(r.val_map[2]),
            fmt_f64(r.val_map[3])
        );
    }
    out
}

pub fn probe_csv(rows: &[ProbeLogRow]) -> String {
    let mut header = String::from("epoch,train_loss,val_mean_acc,val_mean_auc");
    for name in CATEGORY_NAMES {
        let _ = write!(header, ",acc_{name},auc_{name}");
    }
    header.push('\n');
    let mut out = header;
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.epoch,
            fmt_f64(r.train_loss),
            fmt_f64(r.val_mean_acc),
            fmt_f64(r.val_mean_auc)
        );
        for c in 0..CATEGORY_NAMES.len() {
            let auc = r.per_category_auc[c].unwrap_or(f64::NAN);
            let _ = write!(out, ",{},{}", fmt_f64(r.per_category_acc[c]), fmt_f64(auc));
        }
        out.push('\n');
    }
    out
}

/// Parse one named f64 column out of a metric CSV (for plot extraction).
pub fn csv_column(body: &str, column: &str) -> Option<Vec<(u64, f64)>> {
    let mut lines = body.lines();
    let header = lines.next()?;
    let cols: Vec<&str> = header.split(',').collect();
    let ix = cols.iter().position(|c| *c == column)?;
    let epoch_ix = cols.iter().position(|c| *c == "epoch")?;
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let epoch: u64 = fields.get(epoch_ix)?.parse().ok()?;
        let value: f64 = match *fields.get(ix)? {
            "nan" => f64::NAN,
            v => v.parse().ok()?,
        };
        out.push((epoch, value));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detect_csv_roundtrips_column() {
        let rows = vec![
            DetectLogRow {
                epoch: 0,
                phase: 1,
                lambda: 0.0,
                encoder_lr: 0.0,
                train_loss: 1.5,
                l_sup: 1.5,
                l_cons: 0.0,
                val_map: [0.1, 0.1, 0.05, 0.0],
            },
            DetectLogRow {
                epoch: 1,
                phase: 2,
                lambda: 0.15,
                encoder_lr: 1e-5,
                train_loss: 1.2,
                l_sup: 1.1,
                l_cons: 0.1,
                val_map: [0.3, 0.3, 0.2, 0.1],
            },
        ];
        let body = detect_csv(&rows);
        let lam = csv_column(&body, "lambda").unwrap();
        assert_eq!(lam.len(), 2);
        assert_eq!(lam[1].0, 1);
        assert!((lam[1].1 - 0.15).abs() < 1e-12);
        let map50 = csv_column(&body, "val_map_0.50").unwrap();
        assert!((map50[1].1 - 0.2).abs() < 1e-12);
        assert!(csv_column(&body, "missing").is_none());
    }

    #[test]
    fn nan_cells_parse_back() {
        let rows = vec![PretrainLogRow {
            epoch: 0,
            mean_loss: f64::NAN,
            eval_mse: 0.25,
            eval_psnr: 6.0206,
        }];
        let body = pretrain_csv(&rows);
        let col = csv_column(&body, "mean_loss").unwrap();
        assert!(col[0].1.is_nan());
    }
}
