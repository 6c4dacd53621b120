//! Line-oriented front end over one [`Session`].
//!
//! Any line that is not a command is taken as an instruction.

use std::io::{BufRead, Write};

use crate::session::{Models, Session, StateView};

const HELP: &str = "commands: <instruction> | step [n] | state | reset [seed] | help | quit";

fn summary(v: &StateView) -> String {
    let mut out = String::new();
    if let Some(ins) = &v.instruction {
        out.push_str(&format!("({}, {}, {}) ", ins.subject, ins.relation.short_name(), ins.object));
    }
    if let Some(g) = &v.goal {
        out.push_str(&format!("goal ({:.1}, {:.1}) ", g.cx, g.cy));
    }
    if let (Some(s), Some(r)) = (v.last_score, v.reward) {
        out.push_str(&format!("score {s:.3} reward {r} "));
    }
    out.push_str(&format!("step {}/{}", v.step, v.horizon));
    if let Some(ok) = v.success {
        out.push_str(if ok { " success" } else { " failure" });
    }
    out
}

/// Run until `quit` or end of input. Session errors are reported on `output`
/// and the loop continues; only I/O errors end it early.
pub fn run<R: BufRead, W: Write>(mut session: Session, models: &Models, input: R, mut output: W) -> std::io::Result<()> {
    writeln!(output, "{HELP}")?;
    let objects: Vec<&str> = session.scene().objects.iter().map(|o| o.category.as_str()).collect();
    writeln!(output, "on the table: {}", objects.join(", "))?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        let mut words = line.split_whitespace();
        let reply = match (words.next(), words.next()) {
            (None, _) => continue,
            (Some("quit" | "exit"), None) => break,
            (Some("help"), None) => Ok(HELP.to_owned()),
            (Some("state"), None) => session.view(models).map(|v| summary(&v)).map_err(|e| e.to_string()),
            (Some("step"), n) => match n.map(str::parse::<usize>).unwrap_or(Ok(1)) {
                Ok(n) => session
                    .step(n, models)
                    .map(|r| {
                        let moves: Vec<String> = r.actions.iter().map(|a| format!("{a:?}")).collect();
                        format!("{} | {}", moves.join(" "), summary(&r.state))
                    })
                    .map_err(|e| e.to_string()),
                Err(_) => Err("usage: step [n]".to_owned()),
            },
            (Some("reset"), seed) => match seed.map(str::parse::<u64>).transpose() {
                Ok(seed) => session.reset(seed, models).map(|_| "reset".to_owned()).map_err(|e| e.to_string()),
                Err(_) => Err("usage: reset [seed]".to_owned()),
            },
            _ => session.instruct(line, models).map(|v| summary(&v)).map_err(|e| e.to_string()),
        };
        match reply {
            Ok(text) => writeln!(output, "{text}")?,
            Err(e) => writeln!(output, "error: {e}")?,
        }
    }
    Ok(())
}

