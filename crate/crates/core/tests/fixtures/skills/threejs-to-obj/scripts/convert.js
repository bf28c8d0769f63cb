const fs = require('fs');
const scene = JSON.parse(fs.readFileSync(process.argv[2], 'utf8'));
console.log(`# ${scene.object ? scene.object.name : 'scene'}`);
