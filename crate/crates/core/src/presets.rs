//! Published per-benchmark strategy and loss-weight settings.

use serde::{Deserialize, Serialize};

use crate::augment::StrategyKind::{self, CodeSwitch as CS, MachineTranslation as MT, SubwordSampling as SS};
use crate::data::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    CrossLingualTransfer,
    TranslateTrainAll,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::CrossLingualTransfer, Setting::TranslateTrainAll];

    pub fn name(self) -> &'static str {
        match self {
            Setting::CrossLingualTransfer => "cross-lingual-transfer",
            Setting::TranslateTrainAll => "translate-train-all",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cross-lingual-transfer" | "cross" | "zero-shot" => Ok(Setting::CrossLingualTransfer),
            "translate-train-all" | "translate" => Ok(Setting::TranslateTrainAll),
            other => Err(format!("unknown setting {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Xnli,
    PawsX,
    Pos,
    Ner,
    XQuad,
    Mlqa,
    TyDiQa,
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::Xnli,
        Benchmark::PawsX,
        Benchmark::Pos,
        Benchmark::Ner,
        Benchmark::XQuad,
        Benchmark::Mlqa,
        Benchmark::TyDiQa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Xnli => "xnli",
            Benchmark::PawsX => "pawsx",
            Benchmark::Pos => "pos",
            Benchmark::Ner => "ner",
            Benchmark::XQuad => "xquad",
            Benchmark::Mlqa => "mlqa",
            Benchmark::TyDiQa => "tydiqa",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Benchmark::Xnli => "XNLI",
            Benchmark::PawsX => "PAWS-X",
            Benchmark::Pos => "POS",
            Benchmark::Ner => "NER",
            Benchmark::XQuad => "XQuAD",
            Benchmark::Mlqa => "MLQA",
            Benchmark::TyDiQa => "TyDiQA",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Benchmark::Xnli | Benchmark::PawsX => Task::Classification,
            Benchmark::Pos | Benchmark::Ner => Task::SequenceLabeling,
            Benchmark::XQuad | Benchmark::Mlqa | Benchmark::TyDiQa => Task::SpanExtraction,
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == key)
            .ok_or_else(|| format!("unknown benchmark {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub a_star: StrategyKind,
    pub a: StrategyKind,
    pub a_prime: StrategyKind,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Columns in [`Benchmark::ALL`] order.
const CROSS_A_STAR: [StrategyKind; 7] = [CS, CS, SS, SS, CS, CS, SS];
const CROSS_A: [StrategyKind; 7] = [CS, CS, SS, SS, SS, SS, SS];
const CROSS_A_PRIME: [StrategyKind; 7] = [CS, CS, SS, SS, SS, SS, SS];
const CROSS_LAMBDA2: [f64; 7] = [5.0, 2.0, 0.3, 5.0, 5.0, 5.0, 5.0];

const TRANSLATE_A_STAR: [StrategyKind; 7] = [MT, MT, SS, SS, CS, CS, SS];
const TRANSLATE_A: [StrategyKind; 7] = [MT; 7];
const TRANSLATE_A_PRIME: [StrategyKind; 7] = [MT, MT, SS, SS, SS, SS, SS];
const TRANSLATE_LAMBDA2: [f64; 7] = [1.0, 1.0, 0.3, 1.0, 0.1, 0.5, 0.3];

const LAMBDA1: f64 = 5.0;

/// Searched values of λ1 and λ2.
pub const LAMBDA1_GRID: [f64; 3] = [1.0, 2.0, 5.0];
pub const LAMBDA2_GRID: [f64; 5] = [0.3, 0.5, 1.0, 2.0, 5.0];

pub fn preset(bench: Benchmark, setting: Setting) -> Preset {
    let i = Benchmark::ALL.iter().position(|&b| b == bench).expect("listed benchmark");
    match setting {
        Setting::CrossLingualTransfer => Preset {
            a_star: CROSS_A_STAR[i],
            a: CROSS_A[i],
            a_prime: CROSS_A_PRIME[i],
            lambda1: LAMBDA1,
            lambda2: CROSS_LAMBDA2[i],
        },
        Setting::TranslateTrainAll => Preset {
            a_star: TRANSLATE_A_STAR[i],
            a: TRANSLATE_A[i],
            a_prime: TRANSLATE_A_PRIME[i],
            lambda1: LAMBDA1,
            lambda2: TRANSLATE_LAMBDA2[i],
        },
    }
}

/// One preset as `A*=CS A=CS A′=CS λ1=5.0 λ2=5.0`.
pub fn render_row(bench: Benchmark, setting: Setting) -> String {
    let p = preset(bench, setting);
    format!(
        "A*={} A={} A\u{2032}={} \u{3bb}1={:.1} \u{3bb}2={:.1}",
        p.a_star, p.a, p.a_prime, p.lambda1, p.lambda2
    )
}

/// Both settings as aligned tables, one column per benchmark.
pub fn render_tables() -> String {
    let mut out = String::new();
    for setting in Setting::ALL {
        let rows: [(&str, Box<dyn Fn(Preset) -> String>); 5] = [
            ("A*", Box::new(|p: Preset| p.a_star.to_string())),
            ("A", Box::new(|p: Preset| p.a.to_string())),
            ("A\u{2032}", Box::new(|p: Preset| p.a_prime.to_string())),
            ("\u{3bb}1", Box::new(|p: Preset| format!("{:.1}", p.lambda1))),
            ("\u{3bb}2", Box::new(|p: Preset| format!("{:.1}", p.lambda2))),
        ];
        out.push_str(&format!("[{setting}]\n"));
        out.push_str(&format!("{:<4}", ""));
        for b in Benchmark::ALL {
            out.push_str(&format!(" {:>7}", b.display_name()));
        }
        out.push('\n');
        for (label, cell) in &rows {
            out.push_str(label);
            for _ in label.chars().count()..4 {
                out.push(' ');
            }
            for b in Benchmark::ALL {
                out.push_str(&format!(" {:>7}", cell(preset(b, setting))));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_rows() {
        assert_eq!(
            render_row(Benchmark::Xnli, Setting::CrossLingualTransfer),
            "A*=CS A=CS A\u{2032}=CS \u{3bb}1=5.0 \u{3bb}2=5.0"
        );
        assert_eq!(
            render_row(Benchmark::TyDiQa, Setting::TranslateTrainAll),
            "A*=SS A=MT A\u{2032}=SS \u{3bb}1=5.0 \u{3bb}2=0.3"
        );
        let pos = preset(Benchmark::Pos, Setting::TranslateTrainAll);
        assert_eq!((pos.a_star, pos.a, pos.a_prime, pos.lambda1, pos.lambda2), (SS, MT, SS, 5.0, 0.3));
    }

    #[test]
    fn presets_lie_on_the_search_grid() {
        for b in Benchmark::ALL {
            for s in Setting::ALL {
                let p = preset(b, s);
                assert!(LAMBDA1_GRID.contains(&p.lambda1));
                assert!(LAMBDA2_GRID.contains(&p.lambda2) || p.lambda2 == 0.1, "{b:?} {s:?}");
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("PAWS-X".parse::<Benchmark>().unwrap(), Benchmark::PawsX);
        assert_eq!("tydiqa".parse::<Benchmark>().unwrap(), Benchmark::TyDiQa);
        assert!("squad".parse::<Benchmark>().is_err());
    }
}
