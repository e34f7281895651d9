#![allow(dead_code)]

use std::sync::Arc;

use careledger_core::careflow::decision::DecisionConfig;
use careledger_core::careflow::Careflow;
use careledger_core::crypto::{generate_keypair, KeyPair};
use careledger_core::{Node, Role};

pub struct Clinic {
    pub dir: tempfile::TempDir,
    pub flow: Careflow,
    pub admin: KeyPair,
}

impl Clinic {
    pub fn new() -> Clinic {
        Clinic::with_config(DecisionConfig::default())
    }

    pub fn with_config(config: DecisionConfig) -> Clinic {
        let dir = tempfile::tempdir().unwrap();
        let (node, admin) = Node::create(dir.path(), "admin", "Administrator").unwrap();
        Clinic { flow: Careflow::new(Arc::new(node), config), dir, admin }
    }

    pub fn node(&self) -> &Arc<Node> {
        self.flow.node()
    }

    /// Requests and approves a registration, returning the delivered keys.
    pub fn enroll(&self, id: &str, role: Role, bound: Option<&str>) -> KeyPair {
        self.flow.request_registration(id, role, id, bound).unwrap();
        self.flow.approve_registration(&self.admin, id).unwrap()
    }

    /// Keys for a user that asked to register but was never approved.
    pub fn pending(&self, id: &str, role: Role) -> KeyPair {
        self.flow.request_registration(id, role, id, None).unwrap();
        generate_keypair(id).unwrap()
    }
}
