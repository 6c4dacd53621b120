//! One interactive tabletop: a scene, the active instruction, and the episode
//! clock. Shared by the REPL and the HTTP server.

use serde::{Deserialize, Serialize};

use ngd_core::detector::DetectorModel;
use ngd_core::langparse::{self, Relation};
use ngd_core::policy::{workspace_scene, EpisodeConfig, ObjectSet, PolicyState, QNetwork};
use ngd_core::synthesis::{synthesize_goal_with, GoalConfiguration, SynthesisConfig};
use ngd_core::world::{Action, Scene};
use ngd_core::{rng, Error, Result};

/// Read-only models shared by every session.
pub struct Models {
    pub detector: DetectorModel,
    pub policy: QNetwork,
    pub env: EpisodeConfig,
    pub synthesis: SynthesisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub subject: String,
    pub relation: Relation,
    pub object: String,
    pub subject_id: u32,
    pub object_id: u32,
}

/// Body of every state-bearing reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub scene: Scene,
    pub instruction: Option<Instruction>,
    pub goal: Option<GoalConfiguration>,
    /// Detector score of the active instruction on the current scene.
    pub last_score: Option<f64>,
    /// Detector binary reward on the current scene.
    pub reward: Option<bool>,
    pub step: usize,
    pub horizon: usize,
    pub done: bool,
    /// Ground-truth verdict once the object has been released.
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    /// Scene after each executed move (the last one released if the episode ended).
    pub scenes: Vec<Scene>,
    pub actions: Vec<Action>,
    pub state: StateView,
}

/// Why a session request was refused.
#[derive(Debug)]
pub enum SessionError {
    Unparseable(ngd_core::ParseError),
    UnknownObject(String),
    NoInstruction,
    Core(Error),
}

impl From<Error> for SessionError {
    fn from(e: Error) -> Self {
        SessionError::Core(e)
    }
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::Unparseable(e) => write!(f, "unparseable expression: {e}"),
            SessionError::UnknownObject(c) => write!(f, "no {c} on the table"),
            SessionError::NoInstruction => write!(f, "no active instruction"),
            SessionError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub struct Session {
    pub id: String,
    seed: u64,
    scene: Scene,
    instruction: Option<Instruction>,
    goal: Option<GoalConfiguration>,
    step: usize,
    success: Option<bool>,
    rng: rng::Rng,
}

impl Session {
    pub fn new(id: String, seed: u64, models: &Models) -> Result<Self> {
        let scene = workspace_scene(&models.env, ObjectSet::Seen, &mut rng::stream(seed, "session.scene"))?;
        Ok(Self {
            id,
            seed,
            scene,
            instruction: None,
            goal: None,
            step: 0,
            success: None,
            rng: rng::stream(seed, "session.synthesis"),
        })
    }

    pub fn reset(&mut self, seed: Option<u64>, models: &Models) -> Result<()> {
        let id = std::mem::take(&mut self.id);
        *self = Session::new(id, seed.unwrap_or(self.seed), models)?;
        Ok(())
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    fn done(&self, models: &Models) -> bool {
        self.instruction.is_some() && self.step >= models.env.horizon
    }

    pub fn view(&self, models: &Models) -> Result<StateView> {
        let (last_score, reward) = match &self.instruction {
            Some(ins) => {
                let pair = (
                    self.scene.normalized_features(ins.subject_id)?,
                    self.scene.normalized_features(ins.object_id)?,
                );
                let v = models.detector.embed(&ins.text)?;
                let s = models.detector.scores_for_embedding(&v, &[pair])?[0];
                (Some(s), Some(s > models.detector.threshold_for_embedding(&v)?))
            }
            None => (None, None),
        };
        Ok(StateView {
            session_id: self.id.clone(),
            scene: self.scene.clone(),
            instruction: self.instruction.clone(),
            goal: self.goal,
            last_score,
            reward,
            step: self.step,
            horizon: models.env.horizon,
            done: self.done(models),
            success: self.success,
        })
    }

    /// Parse, grasp the subject, and synthesize a goal. A new instruction
    /// restarts the episode clock on the current scene.
    pub fn instruct(&mut self, text: &str, models: &Models) -> std::result::Result<StateView, SessionError> {
        let parsed = langparse::parse_text(text).map_err(SessionError::Unparseable)?;
        let find = |c: &str| {
            self.scene.find_category(c).map(|o| o.id).ok_or_else(|| SessionError::UnknownObject(c.to_owned()))
        };
        let subject_id = find(&parsed.subject)?;
        let object_id = find(&parsed.object)?;
        let mut scene = self.scene.release_object().unwrap_or_else(|_| self.scene.clone());
        scene.held = Some(subject_id);
        let goal = synthesize_goal_with(&models.detector, text, &scene, &models.synthesis, &mut self.rng)?;
        self.scene = scene;
        self.goal = Some(goal);
        self.step = 0;
        self.success = None;
        self.instruction = Some(Instruction {
            text: text.to_owned(),
            subject: parsed.subject,
            relation: parsed.relation,
            object: parsed.object,
            subject_id,
            object_id,
        });
        Ok(self.view(models)?)
    }

    /// Up to `count` greedy policy moves; the object is released when the
    /// horizon is reached.
    pub fn step(&mut self, count: usize, models: &Models) -> std::result::Result<StepReply, SessionError> {
        let ins = self.instruction.clone().ok_or(SessionError::NoInstruction)?;
        let mut scenes = Vec::new();
        let mut actions = Vec::new();
        while actions.len() < count && self.step < models.env.horizon {
            let state = PolicyState { scene: self.scene.clone(), subject: ins.subject_id, object: ins.object_id };
            let q = models.policy.q_values(&state)?;
            let action = ngd_core::policy::select_action(&q, 0.0, &mut self.rng);
            self.scene = self.scene.apply_action(action, models.env.step)?;
            self.step += 1;
            if self.step == models.env.horizon {
                self.scene = self.scene.release_object()?;
                self.success = Some(self.scene.predicate_holds(ins.subject_id, ins.object_id, ins.relation)?);
            }
            scenes.push(self.scene.clone());
            actions.push(action);
        }
        Ok(StepReply { scenes, actions, state: self.view(models)? })
    }
}
