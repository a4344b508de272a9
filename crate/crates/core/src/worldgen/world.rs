use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed object vocabulary. Furniture sits on the floor; items live in or on
/// a receptacle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Microwave,
    Cabinet,
    Sink,
    Ashcan,
    Table,
    Jar,
    Cookie,
    Bread,
    Apple,
    Rag,
    Plate,
    Cup,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 12] = [
        ObjectClass::Microwave,
        ObjectClass::Cabinet,
        ObjectClass::Sink,
        ObjectClass::Ashcan,
        ObjectClass::Table,
        ObjectClass::Jar,
        ObjectClass::Cookie,
        ObjectClass::Bread,
        ObjectClass::Apple,
        ObjectClass::Rag,
        ObjectClass::Plate,
        ObjectClass::Cup,
    ];

    pub const FURNITURE: [ObjectClass; 5] = [
        ObjectClass::Microwave,
        ObjectClass::Cabinet,
        ObjectClass::Sink,
        ObjectClass::Ashcan,
        ObjectClass::Table,
    ];

    pub const FOODS: [ObjectClass; 3] = [ObjectClass::Cookie, ObjectClass::Bread, ObjectClass::Apple];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Microwave => "microwave",
            ObjectClass::Cabinet => "cabinet",
            ObjectClass::Sink => "sink",
            ObjectClass::Ashcan => "ashcan",
            ObjectClass::Table => "table",
            ObjectClass::Jar => "jar",
            ObjectClass::Cookie => "cookie",
            ObjectClass::Bread => "bread",
            ObjectClass::Apple => "apple",
            ObjectClass::Rag => "rag",
            ObjectClass::Plate => "plate",
            ObjectClass::Cup => "cup",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn is_furniture(self) -> bool {
        Self::FURNITURE.contains(&self)
    }

    pub fn is_openable(self) -> bool {
        matches!(self, ObjectClass::Microwave | ObjectClass::Cabinet)
    }

    /// Furniture that can hold items (containers plus the table surface).
    pub fn is_receptacle(self) -> bool {
        self.is_furniture()
    }

    pub fn is_powerable(self) -> bool {
        self == ObjectClass::Microwave
    }

    pub fn is_cleanable(self) -> bool {
        matches!(self, ObjectClass::Microwave | ObjectClass::Plate | ObjectClass::Table)
    }

    pub fn is_burnable(self) -> bool {
        Self::FOODS.contains(&self)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub open: bool,
    pub powered: bool,
    pub dirty: bool,
    pub burnt: bool,
    pub held: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Floor,
    In(String),
    Held,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub class: ObjectClass,
    pub location: Location,
    pub flags: Flags,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    /// Id of the furniture the agent stands at.
    pub at: Option<String>,
    pub holding: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub agent: Agent,
}

impl WorldState {
    pub fn object(&self, id: &str) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: &str) -> Option<&mut WorldObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Resolves an action argument: exact id first, then the first object of
    /// that class name.
    pub fn resolve(&self, name: &str) -> Option<&WorldObject> {
        let name = name.trim().to_ascii_lowercase();
        self.object(&name).or_else(|| {
            ObjectClass::from_name(&name).and_then(|c| self.objects.iter().find(|o| o.class == c))
        })
    }

    pub fn first_of(&self, class: ObjectClass) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.class == class)
    }

    pub fn contents<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a WorldObject> + 'a {
        self.objects
            .iter()
            .filter(move |o| matches!(&o.location, Location::In(r) if r == id))
    }

    /// Furniture id the agent must stand at to interact with `obj`.
    pub fn site_of(&self, obj: &WorldObject) -> Option<String> {
        match &obj.location {
            Location::Floor => Some(obj.id.clone()),
            Location::In(r) => Some(r.clone()),
            Location::Held => self.agent.at.clone(),
        }
    }

    pub fn add(&mut self, class: ObjectClass, location: Location) -> String {
        let n = self.objects.iter().filter(|o| o.class == class).count();
        let id = format!("{}_{}", class.name(), n);
        self.objects.push(WorldObject {
            id: id.clone(),
            class,
            location,
            flags: Flags::default(),
        });
        id
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("invalid world: {msg}")));
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return bad(format!("duplicate id {}", o.id));
            }
            match &o.location {
                Location::Floor if !o.class.is_furniture() => {
                    return bad(format!("item {} on the floor", o.id))
                }
                Location::In(r) => match self.object(r) {
                    Some(rec) if rec.class.is_receptacle() && o.class != rec.class => {}
                    _ => return bad(format!("{} located in unknown receptacle {r}", o.id)),
                },
                Location::Held if self.agent.holding.as_deref() != Some(o.id.as_str()) => {
                    return bad(format!("{} held but agent holds {:?}", o.id, self.agent.holding))
                }
                _ => {}
            }
            if o.class.is_furniture() && o.location != Location::Floor {
                return bad(format!("furniture {} must stand on the floor", o.id));
            }
            let f = o.flags;
            if (f.open && !o.class.is_openable())
                || (f.powered && !o.class.is_powerable())
                || (f.dirty && !o.class.is_cleanable())
                || (f.burnt && !o.class.is_burnable())
                || (f.held != (o.location == Location::Held))
            {
                return bad(format!("flags {f:?} not afforded by {}", o.id));
            }
        }
        if let Some(h) = &self.agent.holding {
            if self.object(h).map(|o| &o.location) != Some(&Location::Held) {
                return bad(format!("agent holds {h} which is not held"));
            }
        }
        if let Some(at) = &self.agent.at {
            if !self.object(at).is_some_and(|o| o.class.is_furniture()) {
                return bad(format!("agent at unknown furniture {at}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_round_trip() {
        for c in ObjectClass::ALL {
            assert_eq!(ObjectClass::from_name(c.name()), Some(c));
        }
        assert_eq!(ObjectClass::from_name(" Microwave "), Some(ObjectClass::Microwave));
        assert_eq!(ObjectClass::from_name("fridge"), None);
    }

    #[test]
    fn validate_catches_affordance_violations() {
        let mut w = WorldState::default();
        let mw = w.add(ObjectClass::Microwave, Location::Floor);
        let c = w.add(ObjectClass::Cookie, Location::In(mw.clone()));
        assert!(w.validate().is_ok());
        w.object_mut(&c).unwrap().flags.open = true;
        assert!(w.validate().is_err());
        w.object_mut(&c).unwrap().flags.open = false;
        w.object_mut(&c).unwrap().location = Location::In("nowhere".into());
        assert!(w.validate().is_err());
    }

    #[test]
    fn resolve_by_id_or_class() {
        let mut w = WorldState::default();
        let t = w.add(ObjectClass::Table, Location::Floor);
        let a = w.add(ObjectClass::Apple, Location::In(t));
        assert_eq!(w.resolve("apple").unwrap().id, a);
        assert_eq!(w.resolve("apple_0").unwrap().id, a);
        assert!(w.resolve("cup").is_none());
    }
}
