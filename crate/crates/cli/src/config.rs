//! `key=value` config files and the run-config record written by every command.

use std::fs;
use std::path::Path;

/// Turns `--config FILE` into flags placed right after the subcommand, so
/// flags given on the command line (which come later) take precedence.
pub fn expand_config(args: Vec<String>, subcommands: &[String]) -> Result<Vec<String>, String> {
    let mut out = Vec::with_capacity(args.len());
    let mut injected = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let file = if a == "--config" {
            i += 1;
            Some(args.get(i).cloned().ok_or("--config needs a file path")?)
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        };
        match file {
            Some(f) => injected.extend(read_config(Path::new(&f))?),
            None => out.push(a.clone()),
        }
        i += 1;
    }
    if injected.is_empty() {
        return Ok(out);
    }
    // everything up to the subcommand, config-derived flags, then the user's flags
    let split = out
        .iter()
        .position(|a| subcommands.contains(a))
        .map_or(out.len(), |i| i + 1);
    let mut merged: Vec<String> = out[..split].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&out[split..]);
    Ok(merged)
}

fn read_config(path: &Path) -> Result<Vec<String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        let key = key.trim();
        if key.is_empty() || key == "config" {
            return Err(format!("{}:{}: invalid key {key:?}", path.display(), n + 1));
        }
        match value.trim() {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            v => {
                flags.push(format!("--{key}"));
                flags.push(v.to_string());
            }
        }
    }
    Ok(flags)
}

/// Renders effective flags as `key=value` lines that [`expand_config`] accepts.
pub fn render_run_config(command: &str, flags: &[String]) -> String {
    let mut out = format!("# spoofqa {command}\n");
    let mut i = 0;
    while i < flags.len() {
        let Some(key) = flags[i].strip_prefix("--") else {
            i += 1;
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push_str(&format!("{k}={v}\n"));
            i += 1;
        } else if flags.get(i + 1).is_some_and(|v| !v.starts_with("--")) {
            out.push_str(&format!("{key}={}\n", flags[i + 1]));
            i += 2;
        } else {
            out.push_str(&format!("{key}=true\n"));
            i += 1;
        }
    }
    out
}
