#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dslfm::Panel;

pub fn dslfm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dslfm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSLFM_THREADS")
        .output()
        .expect("binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn panel_csv(panel: &Panel) -> String {
    let mut s = String::from("asset_id,week,ret,market_cap");
    for name in panel.char_names() {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for r in panel.rows() {
        s.push_str(&format!("{},{},{},{}", r.asset_id, r.week, r.ret, r.market_cap.unwrap()));
        for c in &r.chars {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}
