use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::error;
use uotalign::features::slug;
use uotalign::prompt::{render_system_prompt, DescriptionFile, DescriptionManifest};

use super::Status;
use crate::io::{ensure_dir, parse_list, write_json};
use crate::Global;

#[derive(Args, Debug)]
pub struct DescribeArgs {
    /// Comma-separated class names.
    #[arg(long, conflicts_with = "class_file")]
    pub classes: Option<String>,
    /// File with one class name per line.
    #[arg(long)]
    pub class_file: Option<PathBuf>,
    /// Shell command run once per class with the rendered prompt on stdin and
    /// `CLASS_NAME` in its environment; stdout must be the JSON answer.
    /// Without it only the rendered prompts are written.
    #[arg(long)]
    pub template: Option<String>,
}

fn classes(args: &DescribeArgs) -> Result<Vec<String>> {
    let names = match (&args.classes, &args.class_file) {
        (Some(list), _) => parse_list(list, |t| Ok::<_, String>(t.to_string()))?,
        (None, Some(path)) => fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, None) => bail!("give --classes or --class-file"),
    };
    if names.is_empty() {
        bail!("no class names given");
    }
    Ok(names)
}

fn run_template(template: &str, class: &str, prompt: &str) -> Result<String> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(template)
        .env("CLASS_NAME", class)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .context("cannot start template command")?;
    // A command that ignores stdin may close it early; its output still counts.
    let _ = child.stdin.take().expect("stdin is piped").write_all(prompt.as_bytes());
    let out = child.wait_with_output()?;
    if !out.status.success() {
        bail!("template command exited with {}", out.status);
    }
    String::from_utf8(out.stdout).context("template output is not UTF-8")
}

pub fn gen_descriptions(global: &Global, args: &DescribeArgs) -> Result<Status> {
    let names = classes(args)?;
    let prompts_dir = global.out.join("prompts");
    ensure_dir(&prompts_dir)?;
    for name in &names {
        fs::write(prompts_dir.join(format!("{}.txt", slug(name))), render_system_prompt(name))?;
    }
    let Some(template) = &args.template else {
        println!("wrote {} rendered prompts to {}", names.len(), prompts_dir.display());
        return Ok(Status::Success);
    };

    let desc_dir = global.out.join("descriptions");
    ensure_dir(&desc_dir)?;
    let mut outcome = BTreeMap::new();
    let mut written = Vec::new();
    for name in &names {
        let file = format!("{}.json", slug(name));
        let result = run_template(template, name, &render_system_prompt(name)).and_then(|text| {
            let mut parsed = DescriptionFile::from_json_str(&text, name, &format!("template output for {name:?}"))?;
            parsed.class_name = name.clone();
            fs::write(desc_dir.join(&file), parsed.to_json() + "\n")?;
            Ok(())
        });
        match result {
            Ok(()) => {
                written.push(format!("descriptions/{file}"));
                outcome.insert(name.clone(), "ok".to_string());
            }
            Err(e) => {
                error!("{name}: {e:#}");
                outcome.insert(name.clone(), format!("{e:#}"));
            }
        }
    }
    let failed = names.len() - written.len();
    write_json(&global.out.join("descriptions.json"), &DescriptionManifest { description_files: written })?;
    write_json(&global.out.join("generation_report.json"), &outcome)?;
    println!("{} of {} classes described", names.len() - failed, names.len());
    Ok(if failed > 0 { Status::PartialFailure } else { Status::Success })
}
